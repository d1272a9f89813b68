//! One-variable sweeps: train and evaluate once per value.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::Sample;
use crate::metrics::MetricsReport;
use crate::train::{evaluate, train, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepVariable {
    /// Half-width `f` of the statistics window.
    FilterSize,
    /// Number of evolution steps.
    Iterations,
}

impl SweepVariable {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "filter_size" | "f" => Ok(SweepVariable::FilterSize),
            "iterations" | "steps" => Ok(SweepVariable::Iterations),
            _ => Err(Error::InvalidValue(format!(
                "sweep variable must be filter_size or iterations, got {s:?}"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SweepVariable::FilterSize => "filter_size",
            SweepVariable::Iterations => "iterations",
        }
    }

    /// `base` with the variable set to `value`.
    pub fn apply(self, base: &TrainConfig, value: usize) -> TrainConfig {
        let mut cfg = base.clone();
        match self {
            SweepVariable::FilterSize => cfg.evolution.half_window = value,
            SweepVariable::Iterations => cfg.evolution.steps = value,
        }
        cfg
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub variable: SweepVariable,
    pub values: Vec<usize>,
    pub base: TrainConfig,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::InvalidConfig("sweep needs at least one value".into()));
        }
        for &v in &self.values {
            self.variable.apply(&self.base, v).validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: usize,
    pub report: MetricsReport,
}

/// Trains from scratch for every value and scores on `test`.
pub fn run_sweep(spec: &SweepSpec, train_set: &[Sample], test: &[Sample]) -> Result<Vec<SweepRow>> {
    run_sweep_with(spec, train_set, test, |_| {})
}

/// [`run_sweep`] with a callback after every value.
pub fn run_sweep_with(
    spec: &SweepSpec,
    train_set: &[Sample],
    test: &[Sample],
    mut on_row: impl FnMut(&SweepRow),
) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    let mut rows = Vec::with_capacity(spec.values.len());
    for &value in &spec.values {
        let cfg = spec.variable.apply(&spec.base, value);
        let (params, _) = train(train_set, &[], &cfg)?;
        let report = evaluate(test, &params, &cfg)?.mean;
        let row = SweepRow { value, report };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

/// `value,miou,dice,wcov,boundf` with the variable name as first header.
pub fn write_sweep_csv(path: impl AsRef<Path>, variable: SweepVariable, rows: &[SweepRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([variable.as_str(), "miou", "dice", "wcov", "boundf"])?;
    for r in rows {
        w.write_record([
            r.value.to_string(),
            r.report.miou.to_string(),
            r.report.dice.to_string(),
            r.report.wcov.to_string(),
            r.report.boundf.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evolution::EvolutionConfig;
    use crate::field::ImageGrid;
    use crate::synth::{generate_image, Style};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn data(n: usize) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        (0..n)
            .map(|i| {
                let s = generate_image(Style::Disks, 16, 0.05, &mut rng).unwrap();
                Sample {
                    id: i.to_string(),
                    image: ImageGrid::from_gray(&s.image).unwrap(),
                    mask: s.mask,
                }
            })
            .collect()
    }

    #[test]
    fn iteration_sweep_emits_one_row_per_value() {
        let d = data(2);
        let spec = SweepSpec {
            variable: SweepVariable::Iterations,
            values: vec![10, 30, 60, 90],
            base: TrainConfig {
                epochs: 1,
                width_divisor: 16,
                evolution: EvolutionConfig {
                    half_window: 1,
                    ..Default::default()
                },
                ..Default::default()
            },
        };
        let rows = run_sweep(&spec, &d, &d).unwrap();
        assert_eq!(rows.iter().map(|r| r.value).collect::<Vec<_>>(), [10, 30, 60, 90]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sweep.csv");
        write_sweep_csv(&path, spec.variable, &rows).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert!(text.starts_with("iterations,miou"));
        assert_eq!(text.lines().count(), 5);
    }

    #[test]
    fn rejects_empty_and_invalid_values() {
        let mut spec = SweepSpec {
            variable: SweepVariable::FilterSize,
            values: vec![],
            base: TrainConfig::default(),
        };
        assert!(spec.validate().is_err());
        spec.values = vec![5, 0];
        assert!(spec.validate().is_err());
        spec.values = vec![1, 3, 5, 9];
        spec.validate().unwrap();
        assert_eq!(SweepVariable::parse("f").unwrap(), SweepVariable::FilterSize);
        assert!(SweepVariable::parse("depth").is_err());
    }
}
