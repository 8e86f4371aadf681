//! Synthetic ground-truth world standing in for a generator + annotator pair.
//!
//! The world holds a joint distribution over the cross product of every
//! axis's categories. A prompt that forces attributes draws images from the
//! joint conditioned on those attributes; each forced attribute is honored
//! independently with probability `compliance`. In analytic mode the engine
//! reads exact marginals instead of sampling.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AnnotateRequest, AnnotateResponse, Backend, BackendError, GenerateRequest, GenerateResponse, UNKNOWN};
use crate::counterfactuals::{question_for, PromptSet, QuestionPlan, NO, PERSON_QUESTION, YES};
use crate::error::{Error, Result};
use crate::model::{AttributeDistribution, BiasAxis};

const MAX_CELLS: usize = 1 << 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorldMode {
    Sampled,
    #[default]
    Analytic,
}

/// Dense non-negative weights over the cross product of `axes`
/// (row-major, last axis fastest).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Factor {
    pub axes: Vec<String>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum JointSpec {
    /// Full joint table over all axes in declaration order.
    Table { probs: Vec<f64> },
    /// Joint proportional to the product of the factors.
    Factors { factors: Vec<Factor> },
}

impl Default for JointSpec {
    fn default() -> Self {
        JointSpec::Factors { factors: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    #[serde(default)]
    pub mode: WorldMode,
    #[serde(default = "one")]
    pub compliance: f64,
    #[serde(default = "one")]
    pub person_rate: f64,
    #[serde(default)]
    pub joint: JointSpec,
}

fn one() -> f64 {
    1.0
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            mode: WorldMode::Analytic,
            compliance: 1.0,
            person_rate: 1.0,
            joint: JointSpec::default(),
        }
    }
}

impl WorldSpec {
    pub fn with_factors(factors: Vec<Factor>) -> Self {
        Self {
            joint: JointSpec::Factors { factors },
            ..Self::default()
        }
    }

    /// Random skewed world: one unary factor per axis plus pairwise factors
    /// between consecutive axes, with weights `exp(strength * N(0,1)-ish)`.
    pub fn random(axes: &[BiasAxis], seed: u64, strength: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    let z: f64 = (0..4).map(|_| rng.gen::<f64>() - 0.5).sum::<f64>() * 1.7;
                    (strength * z).exp()
                })
                .collect()
        };
        let mut factors = Vec::new();
        for axis in axes {
            factors.push(Factor {
                axes: vec![axis.id.clone()],
                weights: draw(axis.k()),
            });
        }
        for pair in axes.windows(2) {
            factors.push(Factor {
                axes: vec![pair[0].id.clone(), pair[1].id.clone()],
                weights: draw(pair[0].k() * pair[1].k()),
            });
        }
        Self::with_factors(factors)
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    axes: Vec<BiasAxis>,
    ks: Vec<usize>,
    strides: Vec<usize>,
    table: Vec<f64>,
    pub mode: WorldMode,
    pub compliance: f64,
    pub person_rate: f64,
}

impl SyntheticWorld {
    pub fn new(axes: &[BiasAxis], spec: &WorldSpec) -> Result<Self, String> {
        if !(0.0..=1.0).contains(&spec.compliance) {
            return Err(format!("compliance {} outside [0, 1]", spec.compliance));
        }
        if !(0.0..=1.0).contains(&spec.person_rate) {
            return Err(format!("person_rate {} outside [0, 1]", spec.person_rate));
        }
        let ks: Vec<usize> = axes.iter().map(BiasAxis::k).collect();
        let cells = ks
            .iter()
            .try_fold(1usize, |acc, &k| acc.checked_mul(k).filter(|&n| n <= MAX_CELLS))
            .ok_or_else(|| format!("joint table over {ks:?} exceeds {MAX_CELLS} cells"))?;
        let mut strides = vec![1; ks.len()];
        for i in (0..ks.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * ks[i + 1];
        }

        let mut table = match &spec.joint {
            JointSpec::Table { probs } => {
                if probs.len() != cells {
                    return Err(format!("joint table has {} entries, expected {cells}", probs.len()));
                }
                probs.clone()
            }
            JointSpec::Factors { factors } => {
                let mut table = vec![1.0; cells];
                for factor in factors {
                    let idx: Vec<usize> = factor
                        .axes
                        .iter()
                        .map(|id| {
                            axes.iter()
                                .position(|a| &a.id == id)
                                .ok_or_else(|| format!("factor references undeclared axis `{id}`"))
                        })
                        .collect::<Result<_, _>>()?;
                    let size: usize = idx.iter().map(|&i| ks[i]).product();
                    if factor.weights.len() != size {
                        return Err(format!(
                            "factor over {:?} has {} weights, expected {size}",
                            factor.axes,
                            factor.weights.len()
                        ));
                    }
                    for (cell, value) in table.iter_mut().enumerate() {
                        let mut fi = 0;
                        for &i in &idx {
                            fi = fi * ks[i] + (cell / strides[i]) % ks[i];
                        }
                        *value *= factor.weights[fi];
                    }
                }
                table
            }
        };
        if table.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err("joint has negative or non-finite weights".into());
        }
        let total: f64 = table.iter().sum();
        if total <= 0.0 {
            return Err("joint has zero total mass".into());
        }
        if matches!(spec.joint, JointSpec::Table { .. }) && (total - 1.0).abs() > 1e-9 {
            return Err(format!("joint table sums to {total}, expected 1"));
        }
        for p in &mut table {
            *p /= total;
        }
        Ok(Self {
            axes: axes.to_vec(),
            ks,
            strides,
            table,
            mode: spec.mode,
            compliance: spec.compliance,
            person_rate: spec.person_rate,
        })
    }

    pub fn axes(&self) -> &[BiasAxis] {
        &self.axes
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    pub fn category_of(&self, cell: usize, axis: usize) -> usize {
        (cell / self.strides[axis]) % self.ks[axis]
    }

    fn resolve(&self, modifiers: &BTreeMap<String, String>) -> Result<Vec<(usize, usize)>, String> {
        modifiers
            .iter()
            .map(|(axis_id, label)| {
                let a = self
                    .axes
                    .iter()
                    .position(|x| &x.id == axis_id)
                    .ok_or_else(|| format!("modifier on undeclared axis `{axis_id}`"))?;
                let c = self.axes[a]
                    .category_index(label)
                    .ok_or_else(|| format!("modifier category `{label}` absent from joint support of `{axis_id}`"))?;
                Ok((a, c))
            })
            .collect()
    }

    /// Marginal of every axis given exact constraints.
    pub fn conditional_marginals(&self, fixed: &[(usize, usize)]) -> Result<Vec<Vec<f64>>, String> {
        let mut marginals: Vec<Vec<f64>> = self.ks.iter().map(|&k| vec![0.0; k]).collect();
        let mut mass = 0.0;
        for (cell, &p) in self.table.iter().enumerate() {
            if p == 0.0 || fixed.iter().any(|&(a, c)| self.category_of(cell, a) != c) {
                continue;
            }
            mass += p;
            for (a, m) in marginals.iter_mut().enumerate() {
                m[self.category_of(cell, a)] += p;
            }
        }
        if mass <= 0.0 {
            let names: Vec<_> = fixed
                .iter()
                .map(|&(a, c)| format!("{}={}", self.axes[a].id, self.axes[a].categories[c]))
                .collect();
            return Err(format!("modifier combination [{}] absent from joint support", names.join(", ")));
        }
        for m in &mut marginals {
            for v in m.iter_mut() {
                *v /= mass;
            }
        }
        Ok(marginals)
    }

    /// Honored-subset mixture weights for `n` forced modifiers.
    fn subsets(&self, n: usize) -> Vec<(u32, f64)> {
        (0u32..1 << n)
            .filter_map(|mask| {
                let honored = mask.count_ones() as i32;
                let w = self.compliance.powi(honored) * (1.0 - self.compliance).powi(n as i32 - honored);
                (w > 0.0).then_some((mask, w))
            })
            .collect()
    }

    /// Marginal of every axis for images generated under `modifiers`.
    pub fn variant_marginals(&self, modifiers: &BTreeMap<String, String>) -> Result<Vec<Vec<f64>>, String> {
        let forced = self.resolve(modifiers)?;
        let mut out: Vec<Vec<f64>> = self.ks.iter().map(|&k| vec![0.0; k]).collect();
        for (mask, w) in self.subsets(forced.len()) {
            let fixed: Vec<_> = forced
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, &f)| f)
                .collect();
            let m = self.conditional_marginals(&fixed)?;
            for (o, m) in out.iter_mut().zip(m) {
                for (x, y) in o.iter_mut().zip(m) {
                    *x += w * y;
                }
            }
        }
        Ok(out)
    }

    /// Exact distribution of every axis under the weighted prompt mixture.
    pub fn analytic_distributions(&self, prompt_set: &PromptSet) -> Result<Vec<AttributeDistribution>> {
        let mut acc: Vec<Vec<f64>> = self.ks.iter().map(|&k| vec![0.0; k]).collect();
        for variant in &prompt_set.variants {
            let m = self.variant_marginals(&variant.modifiers).map_err(Error::Prompt)?;
            for (a, m) in acc.iter_mut().zip(m) {
                for (x, y) in a.iter_mut().zip(m) {
                    *x += variant.weight * y;
                }
            }
        }
        Ok(self
            .axes
            .iter()
            .zip(acc)
            .map(|(axis, probs)| AttributeDistribution {
                axis_id: axis.id.clone(),
                probs,
                n_samples: 0,
            })
            .collect())
    }

    /// Exact marginal of `axis` under the prompt set; `n_samples` is 0.
    pub fn analytic_distribution(&self, prompt_set: &PromptSet, axis: &BiasAxis) -> Result<AttributeDistribution> {
        let idx = self
            .axes
            .iter()
            .position(|a| a.id == axis.id)
            .ok_or_else(|| Error::Prompt(format!("axis `{}` is not part of the synthetic world", axis.id)))?;
        Ok(self.analytic_distributions(prompt_set)?.swap_remove(idx))
    }
}

#[derive(Debug, Clone)]
enum Query {
    Person,
    Choice(usize),
    Part(usize, usize),
}

struct Sampler {
    cells: Vec<usize>,
    cumulative: Vec<f64>,
}

/// Sampled-mode backend answering the wire protocol from a [`SyntheticWorld`].
///
/// The annotator is perfect: it reports the attributes the image was drawn with.
pub struct SyntheticBackend {
    world: SyntheticWorld,
    questions: HashMap<String, Query>,
    images: HashMap<String, Option<Vec<usize>>>,
    samplers: HashMap<Vec<(usize, usize)>, Sampler>,
}

impl SyntheticBackend {
    pub fn new(world: SyntheticWorld) -> Self {
        let mut questions = HashMap::new();
        questions.insert(PERSON_QUESTION.to_string(), Query::Person);
        for (a, axis) in world.axes.iter().enumerate() {
            match question_for(axis) {
                QuestionPlan::Choice { text, .. } => {
                    questions.insert(text, Query::Choice(a));
                }
                QuestionPlan::Compound { parts, .. } => {
                    for (text, category) in parts {
                        let c = axis.category_index(&category).expect("validated compound question");
                        questions.insert(text, Query::Part(a, c));
                    }
                }
            }
        }
        Self {
            world,
            questions,
            images: HashMap::new(),
            samplers: HashMap::new(),
        }
    }

    pub fn world(&self) -> &SyntheticWorld {
        &self.world
    }

    fn sample_cell(&mut self, fixed: Vec<(usize, usize)>, rng: &mut ChaCha8Rng) -> Result<usize, BackendError> {
        if !self.samplers.contains_key(&fixed) {
            let mut cells = Vec::new();
            let mut cumulative = Vec::new();
            let mut total = 0.0;
            for (cell, &p) in self.world.table.iter().enumerate() {
                if p > 0.0 && fixed.iter().all(|&(a, c)| self.world.category_of(cell, a) == c) {
                    total += p;
                    cells.push(cell);
                    cumulative.push(total);
                }
            }
            if cells.is_empty() {
                return Err(BackendError::Remote("modifier combination absent from joint support".into()));
            }
            self.samplers.insert(fixed.clone(), Sampler { cells, cumulative });
        }
        let sampler = &self.samplers[&fixed];
        let u = rng.gen::<f64>() * sampler.cumulative.last().copied().unwrap_or(0.0);
        let i = sampler.cumulative.partition_point(|&c| c <= u).min(sampler.cells.len() - 1);
        Ok(sampler.cells[i])
    }
}

pub fn image_id(prompt: &str, seed: u64, index: usize) -> String {
    let mut hasher = Sha256::new();
    hasher.update(prompt.as_bytes());
    hasher.update([0u8]);
    hasher.update(seed.to_le_bytes());
    hasher.update((index as u64).to_le_bytes());
    hex::encode(&hasher.finalize()[..10])
}

impl Backend for SyntheticBackend {
    fn id(&self) -> String {
        "synthetic".into()
    }

    fn generate(&mut self, request: &GenerateRequest) -> Result<GenerateResponse, BackendError> {
        let forced = self.world.resolve(&request.modifiers).map_err(BackendError::Remote)?;
        let mut rng = ChaCha8Rng::seed_from_u64(request.seed);
        let mut image_ids = Vec::with_capacity(request.count);
        for index in 0..request.count {
            let person = rng.gen::<f64>() < self.world.person_rate;
            let fixed: Vec<_> = forced
                .iter()
                .filter(|_| rng.gen::<f64>() < self.world.compliance)
                .copied()
                .collect();
            let cell = self.sample_cell(fixed, &mut rng)?;
            let attributes = person.then(|| (0..self.world.ks.len()).map(|a| self.world.category_of(cell, a)).collect());
            let id = image_id(&request.prompt, request.seed, index);
            self.images.insert(id.clone(), attributes);
            image_ids.push(id);
        }
        Ok(GenerateResponse { image_ids })
    }

    fn annotate(&mut self, request: &AnnotateRequest) -> Result<AnnotateResponse, BackendError> {
        let image = self
            .images
            .get(&request.image_id)
            .ok_or_else(|| BackendError::Remote(format!("unknown image `{}`", request.image_id)))?;
        let yes_no = |b: bool| if b { YES } else { NO }.to_string();
        let answer = match (self.questions.get(&request.question), image) {
            (None, _) => UNKNOWN.to_string(),
            (Some(Query::Person), attrs) => yes_no(attrs.is_some()),
            (Some(_), None) => UNKNOWN.to_string(),
            (Some(Query::Choice(a)), Some(attrs)) => self.world.axes[*a].categories[attrs[*a]].clone(),
            (Some(Query::Part(a, c)), Some(attrs)) => yes_no(attrs[*a] == *c),
        };
        Ok(AnnotateResponse { answer })
    }
}
