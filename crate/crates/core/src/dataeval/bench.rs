//! Per-component inference latency.

use crate::detector::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::ndgrad::Array;
use crate::params::Ctx;

/// Mean and sample standard deviation in milliseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Timing {
    pub mean: f64,
    pub std: f64,
}

impl Timing {
    pub fn of(samples: &[f64]) -> Self {
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = if samples.len() > 1 {
            samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self { mean, std: var.sqrt() }
    }

    /// Coefficient of variation; zero for a zero mean.
    pub fn relative_std(&self) -> f64 {
        if self.mean > 0.0 {
            self.std / self.mean
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyBreakdown {
    pub backbone: Timing,
    pub query_generation: Timing,
    pub stages: Vec<Timing>,
    pub decoder: Timing,
    pub total: Timing,
    pub runs: usize,
    pub config: ModelConfig,
}

impl LatencyBreakdown {
    /// Share of the total spent generating queries.
    pub fn query_share(&self) -> f64 {
        self.query_generation.mean / self.total.mean
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("component,mean_ms,std_ms\n");
        let mut row = |k: &str, t: &Timing| s.push_str(&format!("{k},{},{}\n", t.mean, t.std));
        row("backbone", &self.backbone);
        row("query_generation", &self.query_generation);
        for (i, t) in self.stages.iter().enumerate() {
            row(&format!("stage{}", i + 1), t);
        }
        row("decoder", &self.decoder);
        row("total", &self.total);
        s
    }
}

/// Times `n_runs` inference passes over `images` (cycled) after `n_warmup`
/// untimed ones. Components are timed inside the same pass, so their means
/// add up to the total exactly.
pub fn bench_latency(model: &Model, images: &[Array], n_warmup: usize, n_runs: usize) -> Result<LatencyBreakdown> {
    if n_runs < 10 {
        return Err(Error::Config(format!("n_runs must be at least 10, got {n_runs}")));
    }
    if images.is_empty() {
        return Err(Error::Dataset("no scenes to benchmark".into()));
    }
    let pass = |i: usize| -> Result<_> {
        let mut ctx = Ctx::inference(&model.params);
        Ok(model.forward(&mut ctx, &images[i % images.len()])?.times)
    };
    for i in 0..n_warmup {
        pass(i)?;
    }
    let times = (0..n_runs).map(pass).collect::<Result<Vec<_>>>()?;
    let col = |f: &dyn Fn(&crate::detector::PhaseTimes) -> f64| Timing::of(&times.iter().map(f).collect::<Vec<_>>());
    Ok(LatencyBreakdown {
        backbone: col(&|t| t.backbone),
        query_generation: col(&|t| t.query_generation),
        stages: (0..model.config.n_stages).map(|i| col(&|t| t.stages[i])).collect(),
        decoder: col(&|t| t.decoder()),
        total: col(&|t| t.total()),
        runs: n_runs,
        config: model.config.clone(),
    })
}
