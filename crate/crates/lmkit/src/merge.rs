//! Model merging: dynamic probability-space mixtures, simplex weight
//! optimization (EM and Bayesian optimization), and static ARPA export.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::Sentence;
use crate::evaluation::{perplexity_with, query, EvalError, PerplexityReport};
use crate::model::{recompute_backoffs, BackoffModel, ProbEntry, BOS_LOG10_PROB};
use crate::{BOS, EOS, UNK};

/// k nonnegative mixture weights summing to one (within 1e−9).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct InterpolationWeights(Vec<f64>);

impl InterpolationWeights {
    pub fn new(w: Vec<f64>) -> Result<InterpolationWeights, MergeError> {
        if w.is_empty() {
            return Err(MergeError::TooFewModels { k: 0 });
        }
        if w.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(MergeError::InvalidWeight { weights: w });
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(MergeError::InvalidWeight { weights: w });
        }
        Ok(InterpolationWeights(w))
    }

    pub fn uniform(k: usize) -> InterpolationWeights {
        InterpolationWeights(vec![1.0 / k as f64; k])
    }

    /// The i-th simplex corner eᵢ.
    pub fn corner(k: usize, i: usize) -> InterpolationWeights {
        let mut w = vec![0.0; k];
        w[i] = 1.0;
        InterpolationWeights(w)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<f64>> for InterpolationWeights {
    type Error = MergeError;
    fn try_from(w: Vec<f64>) -> Result<InterpolationWeights, MergeError> {
        InterpolationWeights::new(w)
    }
}

impl From<InterpolationWeights> for Vec<f64> {
    fn from(w: InterpolationWeights) -> Vec<f64> {
        w.0
    }
}

#[derive(Debug, thiserror::Error)]
pub enum MergeError {
    #[error("need at least two models, got {k}")]
    TooFewModels { k: usize },
    #[error("invalid mixture weights {weights:?}: must be nonnegative and sum to 1")]
    InvalidWeight { weights: Vec<f64> },
    #[error("{models} models but {weights} weights")]
    WeightCount { models: usize, weights: usize },
    #[error("empty validation set")]
    EmptyValidation,
    #[error("budget {budget} and init_points {init_points} violate budget ≥ init_points ≥ k+1 (k={k})")]
    BudgetTooSmall {
        budget: usize,
        init_points: usize,
        k: usize,
    },
    #[error("static export failed: {0}")]
    ExportBackoff(#[from] crate::model::BackoffRebuildError),
}

/// Log10 of the linear probability mixture Σᵢ wᵢ·10^queryᵢ.
///
/// Zero-weight components are skipped entirely, so a corner weight vector
/// reproduces the surviving model's query bit for bit.
pub fn mixture_query(
    models: &[BackoffModel],
    weights: &InterpolationWeights,
    context: &[&str],
    word: &str,
) -> f64 {
    assert_eq!(
        models.len(),
        weights.len(),
        "one weight per model required"
    );
    let mut terms: Vec<f64> = Vec::with_capacity(models.len());
    for (model, &w) in models.iter().zip(weights.as_slice()) {
        if w > 0.0 {
            terms.push(w.log10() + query(model, context, word));
        }
    }
    match terms.as_slice() {
        [] => f64::NEG_INFINITY,
        [single] => *single,
        _ => {
            let peak = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            peak + terms
                .iter()
                .map(|t| 10f64.powf(t - peak))
                .sum::<f64>()
                .log10()
        }
    }
}

/// Perplexity of the dynamic mixture. OOV counting uses the union
/// vocabulary: a token no model knows is scored through `<unk>` everywhere.
pub fn mixture_perplexity(
    models: &[BackoffModel],
    weights: &InterpolationWeights,
    corpus: &[Sentence],
) -> Result<PerplexityReport, EvalError> {
    perplexity_with(
        corpus,
        |context, word| mixture_query(models, weights, context, word),
        |word| word == UNK || !models.iter().any(|m| m.contains_word(word)),
    )
}

// Per-position component probabilities (linear space), row-major positions ×
// k. Computed once so weight search costs O(positions·k) per evaluation.
struct ProbMatrix {
    probs: Vec<f64>,
    positions: usize,
    k: usize,
}

impl ProbMatrix {
    fn build(models: &[BackoffModel], validation: &[Sentence]) -> Result<ProbMatrix, MergeError> {
        let k = models.len();
        let rows: Vec<Vec<f64>> = validation
            .par_iter()
            .filter(|s| !s.is_empty())
            .map(|sentence| {
                let mut out = Vec::with_capacity((sentence.len() + 1) * k);
                let mut context: Vec<&str> = Vec::with_capacity(sentence.len() + 1);
                context.push(BOS);
                for word in sentence {
                    for model in models {
                        out.push(10f64.powf(query(model, &context, word)));
                    }
                    context.push(word);
                }
                for model in models {
                    out.push(10f64.powf(query(model, &context, EOS)));
                }
                out
            })
            .collect();
        let probs: Vec<f64> = rows.into_iter().flatten().collect();
        if probs.is_empty() {
            return Err(MergeError::EmptyValidation);
        }
        Ok(ProbMatrix {
            positions: probs.len() / k,
            probs,
            k,
        })
    }

    fn perplexity(&self, w: &[f64]) -> f64 {
        let mut log_sum = 0.0;
        for row in self.probs.chunks_exact(self.k) {
            let mix: f64 = row.iter().zip(w).map(|(p, wi)| p * wi).sum();
            log_sum += mix.max(f64::MIN_POSITIVE).log10();
        }
        10f64.powf(-log_sum / self.positions as f64)
    }
}

/// EM outcome; `converged` is false when `max_iter` ran out first.
#[derive(Debug, Clone)]
pub struct EmResult {
    pub weights: InterpolationWeights,
    pub iterations: usize,
    pub converged: bool,
}

/// Maximum-likelihood mixture weights by EM from the uniform initializer:
/// wᵢ ← (1/N)·Σ_positions wᵢpᵢ/Σⱼwⱼpⱼ. The log-likelihood is concave in w,
/// so this converges to the global optimum; iteration stops when the largest
/// weight change drops below `tol`.
pub fn optimize_weights_em(
    models: &[BackoffModel],
    validation: &[Sentence],
    tol: f64,
    max_iter: usize,
) -> Result<EmResult, MergeError> {
    let k = models.len();
    if k < 2 {
        return Err(MergeError::TooFewModels { k });
    }
    let matrix = ProbMatrix::build(models, validation)?;
    let mut w = vec![1.0 / k as f64; k];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        iterations += 1;
        let mut next = vec![0.0f64; k];
        for row in matrix.probs.chunks_exact(k) {
            let denom: f64 = row.iter().zip(&w).map(|(p, wi)| p * wi).sum();
            let denom = denom.max(f64::MIN_POSITIVE);
            for i in 0..k {
                next[i] += w[i] * row[i] / denom;
            }
        }
        let n = matrix.positions as f64;
        for x in &mut next {
            *x /= n;
        }
        // Exact renormalization guards against drift over many iterations.
        let sum: f64 = next.iter().sum();
        for x in &mut next {
            *x /= sum;
        }
        let delta = w
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        w = next;
        if delta < tol {
            converged = true;
            break;
        }
    }
    Ok(EmResult {
        weights: InterpolationWeights::new(w).expect("EM preserves the simplex"),
        iterations,
        converged,
    })
}

/// Bayesian-optimization search budget and seeding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BoConfig {
    /// Total objective evaluations.
    pub budget: usize,
    /// Evaluations spent on the initial design (corners, center, random).
    pub init_points: usize,
    pub seed: u64,
}

/// One evaluated weight configuration.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BoTracePoint {
    pub iteration: usize,
    pub weights: Vec<f64>,
    pub ppl: f64,
}

/// Gaussian-process surrogate over standardized objective values with an RBF
/// kernel; fitted by Cholesky factorization.
struct Surrogate {
    xs: Vec<Vec<f64>>,
    chol: Vec<Vec<f64>>,
    alpha: Vec<f64>,
    ell: f64,
}

const GP_NOISE: f64 = 1e-6;

impl Surrogate {
    fn kernel(a: &[f64], b: &[f64], ell: f64) -> f64 {
        let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        (-d2 / (2.0 * ell * ell)).exp()
    }

    fn fit(xs: Vec<Vec<f64>>, ys: &[f64], ell: f64) -> Surrogate {
        let n = xs.len();
        let mut gram = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..=i {
                let v = Self::kernel(&xs[i], &xs[j], ell);
                gram[i][j] = v;
                gram[j][i] = v;
            }
        }
        let mut noise = GP_NOISE;
        let chol = loop {
            let mut trial = gram.clone();
            for (i, row) in trial.iter_mut().enumerate() {
                row[i] += noise;
            }
            if let Some(l) = cholesky(trial) {
                break l;
            }
            noise *= 10.0;
            assert!(noise < 1.0, "kernel matrix irreparably singular");
        };
        let alpha = solve_cholesky(&chol, ys);
        Surrogate {
            xs,
            chol,
            alpha,
            ell,
        }
    }

    fn predict(&self, x: &[f64]) -> (f64, f64) {
        let kstar: Vec<f64> = self
            .xs
            .iter()
            .map(|xi| Self::kernel(xi, x, self.ell))
            .collect();
        let mean: f64 = kstar.iter().zip(&self.alpha).map(|(a, b)| a * b).sum();
        let v = solve_lower(&self.chol, &kstar);
        let var: f64 = 1.0 + GP_NOISE - v.iter().map(|x| x * x).sum::<f64>();
        (mean, var.max(1e-12).sqrt())
    }
}

fn cholesky(mut a: Vec<Vec<f64>>) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    for j in 0..n {
        for k in 0..j {
            let ajk = a[j][k];
            for i in j..n {
                a[i][j] -= a[i][k] * ajk;
            }
        }
        if a[j][j] <= 0.0 {
            return None;
        }
        let d = a[j][j].sqrt();
        for i in j..n {
            a[i][j] /= d;
        }
    }
    for j in 0..n {
        for k in j + 1..n {
            a[j][k] = 0.0;
        }
    }
    Some(a)
}

fn solve_lower(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut x = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for j in 0..i {
            s -= l[i][j] * x[j];
        }
        x[i] = s / l[i][i];
    }
    x
}

fn solve_cholesky(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut x = solve_lower(l, b);
    // Upper solve with Lᵀ.
    for i in (0..n).rev() {
        let mut s = x[i];
        for j in i + 1..n {
            s -= l[j][i] * x[j];
        }
        x[i] = s / l[i][i];
    }
    x
}

// Abramowitz–Stegun 7.1.26 rational approximation, |error| < 1.5e-7: ample
// for ranking acquisition candidates.
fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    sign * (1.0 - poly * (-x * x).exp())
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn softmax_with_zero(z: &[f64]) -> Vec<f64> {
    let peak = z.iter().cloned().fold(0.0f64, f64::max);
    let mut w: Vec<f64> = z.iter().map(|&v| (v - peak).exp()).collect();
    w.push((-peak).exp());
    let sum: f64 = w.iter().sum();
    for x in &mut w {
        *x /= sum;
    }
    w
}

const Z_BOX: f64 = 8.0;

/// Minimizes validation perplexity over the simplex with a GP surrogate and
/// expected improvement, on the (k−1)-dimensional softmax parametrization.
/// The initial design is the k corners (evaluated as exact one-hot weights),
/// the uniform center, and random points up to `init_points`. Deterministic
/// for a fixed seed; returns the best evaluated point plus the full trace.
pub fn optimize_weights_bo(
    models: &[BackoffModel],
    validation: &[Sentence],
    cfg: &BoConfig,
) -> Result<(InterpolationWeights, Vec<BoTracePoint>), MergeError> {
    let k = models.len();
    if k < 2 {
        return Err(MergeError::TooFewModels { k });
    }
    if cfg.init_points < k + 1 || cfg.budget < cfg.init_points {
        return Err(MergeError::BudgetTooSmall {
            budget: cfg.budget,
            init_points: cfg.init_points,
            k,
        });
    }
    let matrix = ProbMatrix::build(models, validation)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dim = k - 1;

    let mut zs: Vec<Vec<f64>> = Vec::with_capacity(cfg.budget);
    let mut weights: Vec<Vec<f64>> = Vec::with_capacity(cfg.budget);
    let mut ppls: Vec<f64> = Vec::with_capacity(cfg.budget);
    let mut trace: Vec<BoTracePoint> = Vec::with_capacity(cfg.budget);

    let evaluate = |z: Vec<f64>,
                        w: Vec<f64>,
                        zs: &mut Vec<Vec<f64>>,
                        weights: &mut Vec<Vec<f64>>,
                        ppls: &mut Vec<f64>,
                        trace: &mut Vec<BoTracePoint>| {
        let ppl = matrix.perplexity(&w);
        trace.push(BoTracePoint {
            iteration: trace.len(),
            weights: w.clone(),
            ppl,
        });
        zs.push(z);
        weights.push(w);
        ppls.push(ppl);
    };

    // Corners, evaluated as exact one-hot weights; their surrogate inputs sit
    // at the softmax box edge.
    for i in 0..k {
        let mut z = vec![0.0; dim];
        if i < dim {
            z[i] = Z_BOX;
        } else {
            for v in &mut z {
                *v = -Z_BOX;
            }
        }
        let w = InterpolationWeights::corner(k, i).as_slice().to_vec();
        evaluate(z, w, &mut zs, &mut weights, &mut ppls, &mut trace);
    }
    // Uniform center.
    evaluate(
        vec![0.0; dim],
        vec![1.0 / k as f64; k],
        &mut zs,
        &mut weights,
        &mut ppls,
        &mut trace,
    );
    // Random design points.
    for _ in (k + 1)..cfg.init_points {
        let z: Vec<f64> = (0..dim).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let w = softmax_with_zero(&z);
        evaluate(z, w, &mut zs, &mut weights, &mut ppls, &mut trace);
    }

    while trace.len() < cfg.budget {
        // Standardize log-perplexities for the surrogate.
        let ys: Vec<f64> = ppls.iter().map(|p| p.ln()).collect();
        let mean = ys.iter().sum::<f64>() / ys.len() as f64;
        let var = ys.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / ys.len() as f64;
        let scale = var.sqrt().max(1e-12);
        let ys_std: Vec<f64> = ys.iter().map(|y| (y - mean) / scale).collect();
        let surrogate = Surrogate::fit(zs.clone(), &ys_std, 2.0);
        let best_idx = ppls
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .expect("nonempty")
            .0;
        let best_y = ys_std[best_idx];

        // Candidate pool: global uniform draws plus local jitter around the
        // incumbent.
        let mut candidates: Vec<Vec<f64>> = Vec::with_capacity(320);
        for _ in 0..256 {
            candidates.push((0..dim).map(|_| rng.gen_range(-Z_BOX..Z_BOX)).collect());
        }
        let incumbent = zs[best_idx].clone();
        for _ in 0..64 {
            candidates.push(
                incumbent
                    .iter()
                    .map(|v| {
                        (v + rng.gen_range(-0.5..0.5)).clamp(-Z_BOX, Z_BOX)
                    })
                    .collect(),
            );
        }
        let mut best_candidate = None;
        let mut best_ei = f64::NEG_INFINITY;
        for z in candidates {
            let (mu, sigma) = surrogate.predict(&z);
            let improvement = best_y - mu;
            let u = improvement / sigma;
            let ei = improvement * normal_cdf(u) + sigma * normal_pdf(u);
            if ei > best_ei {
                best_ei = ei;
                best_candidate = Some(z);
            }
        }
        let z = best_candidate.expect("candidate pool is never empty");
        let w = softmax_with_zero(&z);
        evaluate(z, w, &mut zs, &mut weights, &mut ppls, &mut trace);
    }

    let best = ppls
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("budget ≥ 1")
        .0;
    let weights = InterpolationWeights::new(weights[best].clone())
        .expect("softmax and corners stay on the simplex");
    Ok((weights, trace))
}

/// Builds one static model over the union of all entry sets: probabilities
/// are the weight-mixed component probabilities at each n-gram, and backoff
/// weights are rebuilt from the normalization identity.
///
/// At every level, each component's `<unk>` mass is spread over the union
/// words that component has never seen (plus `<unk>` itself), keeping the
/// component's contribution a distribution over the union vocabulary even
/// when vocabularies differ. Without the split, each union word unseen by a
/// component would collect that component's full `<unk>` mass, and a context
/// whose explicit continuations nearly exhaust it would re-sum past one,
/// leaving no room for backoff. The cost is that probabilities of words
/// missing from some component sit below the dynamic mixture's values;
/// components with identical vocabularies reproduce the dynamic mixture
/// exactly.
pub fn export_static(
    models: &[BackoffModel],
    weights: &InterpolationWeights,
) -> Result<BackoffModel, MergeError> {
    if models.is_empty() {
        return Err(MergeError::TooFewModels { k: 0 });
    }
    if models.len() != weights.len() {
        return Err(MergeError::WeightCount {
            models: models.len(),
            weights: weights.len(),
        });
    }
    let order = models.iter().map(BackoffModel::order).max().unwrap();
    let mut merged = BackoffModel::new(order);

    // Unigram level over the union vocabulary.
    let vocab: std::collections::BTreeSet<&str> = models
        .iter()
        .flat_map(|m| m.vocab())
        .chain([UNK, EOS, BOS])
        .collect();
    let missing: Vec<usize> = models
        .iter()
        .map(|m| vocab.iter().filter(|w| !m.contains_word(w)).count())
        .collect();
    for &word in &vocab {
        if word == BOS {
            merged.insert(1, Box::from(BOS), ProbEntry::prob(BOS_LOG10_PROB));
            continue;
        }
        let mut p = 0.0;
        for ((model, &w), &n) in models.iter().zip(weights.as_slice()).zip(&missing) {
            if w == 0.0 {
                continue;
            }
            // `<unk>` keeps only one share of its own mass; the rest covers
            // the words this component has never seen.
            let component = if word != UNK && model.contains_word(word) {
                10f64.powf(model.raw_query(&[word]))
            } else {
                10f64.powf(model.raw_query(&[UNK])) / (n as f64 + 1.0)
            };
            p += w * component;
        }
        merged.insert(1, Box::from(word), ProbEntry::prob(p.log10()));
    }

    // Higher levels: union of entry keys, probability = weighted sum of the
    // per-component extensions. Context tokens a component lacks map to
    // `<unk>` inside `query`; the share rule mirrors the unigram level.
    for m in 2..=order {
        let keys: std::collections::BTreeSet<&str> = models
            .iter()
            .filter(|md| md.order() >= m)
            .flat_map(|md| md.level(m).keys().map(|k| k.as_ref()))
            .collect();
        for key in keys {
            let tokens: Vec<&str> = key.split(' ').collect();
            let (context, word) = tokens.split_at(m - 1);
            let word = word[0];
            let mut p = 0.0;
            for ((model, &w), &n) in models.iter().zip(weights.as_slice()).zip(&missing) {
                if w == 0.0 {
                    continue;
                }
                let component = 10f64.powf(query(model, context, word));
                let component = if word != UNK && model.contains_word(word) {
                    component
                } else {
                    component / (n as f64 + 1.0)
                };
                p += w * component;
            }
            merged.insert(m, Box::from(key), ProbEntry::prob(p.log10()));
        }
    }

    recompute_backoffs(&mut merged)?;
    Ok(merged)
}
