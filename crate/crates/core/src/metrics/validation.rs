use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pearson correlation; `None` when either side is constant or shorter than 2.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    if x.len() != y.len() {
        return Err(Error::Metrics(format!(
            "paired lists differ in length: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len();
    if n < 2 {
        return Ok(None);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptCorrelation {
    pub prompt: String,
    /// `None` when undefined (a constant list).
    pub r: Option<f64>,
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub prompts: Vec<PromptCorrelation>,
    /// Mean over prompts with a defined correlation.
    pub mean_r: Option<f64>,
}

/// Per-prompt correlation between predicted and post-mitigation sensitivities.
pub fn validate_correlation(per_prompt: &[(String, Vec<f64>, Vec<f64>)]) -> Result<CorrelationReport> {
    let prompts = per_prompt
        .iter()
        .map(|(prompt, pre, post)| {
            Ok(PromptCorrelation {
                prompt: prompt.clone(),
                r: pearson(pre, post)?,
                pairs: pre.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let defined: Vec<f64> = prompts.iter().filter_map(|p| p.r).collect();
    let mean_r = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(CorrelationReport { prompts, mean_r })
}
