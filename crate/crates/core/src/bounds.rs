//! Output-variance bound, distance thresholds, slack ratios and gradient
//! ordering measurements.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adaptation::param_distance;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{loss_and_gradient, ParameterStore};
use crate::stats::{mean, pairwise_sum, sample_variance, spearman};
use crate::tensor::Tensor;

/// Per-layer weight/bias variances of a random network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceProfile {
    pub var_w: Vec<f64>,
    pub var_b: Vec<f64>,
    /// Width `N`; every layer has at most this many outputs.
    pub width: usize,
    /// Lipschitz constant of the activation.
    pub lipschitz: f64,
}

impl VarianceProfile {
    pub fn uniform(depth: usize, width: usize, var_w: f64, var_b: f64) -> Self {
        VarianceProfile {
            var_w: vec![var_w; depth],
            var_b: vec![var_b; depth],
            width,
            lipschitz: 1.0,
        }
    }

    pub fn depth(&self) -> usize {
        self.var_w.len()
    }

    pub fn validate(&self) -> Result<()> {
        let ok = !self.var_w.is_empty()
            && self.var_w.len() == self.var_b.len()
            && self.width >= 1
            && self.lipschitz >= 0.0
            && self
                .var_w
                .iter()
                .chain(&self.var_b)
                .all(|&v| v >= 0.0 && v.is_finite());
        if !ok {
            return Err(Error::Validation(format!(
                "invalid variance profile {self:?}"
            )));
        }
        Ok(())
    }
}

/// `‖x‖² (B²N)^L Π Var(Wⁱ) + B²N Var(b^L) + B² Σ_{i<L} N Var(bⁱ) Π_{j>i} B²N Var(Wʲ)`.
pub fn variance_bound(profile: &VarianceProfile, x_norm: f64) -> f64 {
    let l = profile.depth();
    let n = profile.width as f64;
    let b2 = profile.lipschitz * profile.lipschitz;
    let gain = |j: usize| b2 * n * profile.var_w[j];
    let input_term = x_norm * x_norm * (0..l).map(gain).product::<f64>();
    let last_bias = b2 * n * profile.var_b[l - 1];
    let inner: f64 = (0..l - 1)
        .map(|i| n * profile.var_b[i] * (i + 1..l).map(gain).product::<f64>())
        .sum();
    input_term + last_bias + b2 * inner
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Law {
    Gaussian,
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    /// Sum over output coordinates of the sample variance.
    pub variance: f64,
    pub std_error: f64,
    pub trials: usize,
}

fn draw(law: Law, var: f64, rng: &mut ChaCha8Rng) -> f64 {
    if var == 0.0 {
        return 0.0;
    }
    match law {
        Law::Gaussian => {
            let z: f64 = StandardNormal.sample(rng);
            z * var.sqrt()
        }
        Law::Uniform => {
            let a = (3.0 * var).sqrt();
            rng.random_range(-a..=a)
        }
    }
}

/// Monte-Carlo variance of `f(x)` over random dense networks whose layer `l`
/// has `widths[l]` outputs, i.i.d. zero-mean weights/biases with the profile's
/// variances, and `activation` applied after every layer.
pub fn mc_output_variance(
    widths: &[usize],
    profile: &VarianceProfile,
    x: &[f64],
    trials: usize,
    seed: u64,
    law: Law,
    activation: Activation,
) -> Result<McEstimate> {
    profile.validate()?;
    if trials < 100 {
        return Err(Error::Contract(format!(
            "need at least 100 trials, got {trials}"
        )));
    }
    if widths.len() != profile.depth() || widths.iter().any(|&w| w == 0 || w > profile.width) {
        return Err(Error::Dimension(format!(
            "widths {widths:?} do not fit a depth-{} width-{} profile",
            profile.depth(),
            profile.width
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out_dim = *widths.last().expect("nonempty");
    let mut outputs = Vec::with_capacity(trials * out_dim);
    for _ in 0..trials {
        let mut h = x.to_vec();
        for (l, &w) in widths.iter().enumerate() {
            let mut next = vec![0.0; w];
            for z in next.iter_mut() {
                let mut acc = draw(law, profile.var_b[l], &mut rng);
                for &hi in &h {
                    acc += draw(law, profile.var_w[l], &mut rng) * hi;
                }
                *z = match activation {
                    Activation::Relu => acc.max(0.0),
                    Activation::Identity => acc,
                };
            }
            h = next;
        }
        outputs.extend(h);
    }
    let means: Vec<f64> = (0..out_dim)
        .map(|c| {
            let col: Vec<f64> = outputs.iter().skip(c).step_by(out_dim).copied().collect();
            mean(&col)
        })
        .collect();
    let dev: Vec<f64> = outputs
        .chunks(out_dim)
        .map(|y| y.iter().zip(&means).map(|(a, m)| (a - m) * (a - m)).sum())
        .collect();
    let n = trials as f64;
    Ok(McEstimate {
        variance: pairwise_sum(&dev) / (n - 1.0),
        std_error: sample_variance(&dev).sqrt() / n.sqrt(),
        trials,
    })
}

/// One randomly drawn variance-bound check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thm1Case {
    pub widths: Vec<usize>,
    pub profile: VarianceProfile,
    pub x: Vec<f64>,
    pub law: Law,
    pub activation: Activation,
}

impl Thm1Case {
    /// Depth 1–3, width `N` ≤ 16, layer widths in `1..=N` (the last layer of
    /// every fourth case at exactly `N`), input dim ≤ 16.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let depth = rng.random_range(1..=3);
        let width = rng.random_range(1..=16);
        let mut widths: Vec<usize> = (0..depth).map(|_| rng.random_range(1..=width)).collect();
        if seed.is_multiple_of(4) {
            widths.iter_mut().for_each(|w| *w = width);
        }
        let m = rng.random_range(1..=16);
        let mut x: Vec<f64> = (0..m).map(|_| StandardNormal.sample(&mut rng)).collect();
        let target = rng.random_range(0.5..2.0);
        let n = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        x.iter_mut().for_each(|v| *v *= target / n);
        let var_w = (0..depth)
            .map(|_| rng.random_range(0.0..2.0 / width as f64))
            .collect();
        let var_b = (0..depth).map(|_| rng.random_range(0.0..0.1)).collect();
        Thm1Case {
            widths,
            profile: VarianceProfile {
                var_w,
                var_b,
                width,
                lipschitz: 1.0,
            },
            x,
            law: if seed.is_multiple_of(2) {
                Law::Gaussian
            } else {
                Law::Uniform
            },
            activation: if seed % 3 == 2 {
                Activation::Identity
            } else {
                Activation::Relu
            },
        }
    }

    pub fn x_norm(&self) -> f64 {
        self.x.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thm1Row {
    pub case_seed: u64,
    pub depth: usize,
    pub width: usize,
    pub bound: f64,
    pub mc_variance: f64,
    pub std_error: f64,
    /// `mc_variance ≤ bound + 3·std_error`
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thm1Summary {
    pub configs: usize,
    pub trials: usize,
    pub violations: usize,
    /// Largest `mc_variance / bound` among cases with a positive bound.
    pub max_ratio: f64,
    pub rows: Vec<Thm1Row>,
}

/// Runs `configs` random cases of `trials` draws each.
pub fn thm1_check(configs: usize, trials: usize, seed: u64) -> Result<Thm1Summary> {
    let mut rows = Vec::with_capacity(configs);
    for i in 0..configs {
        let case_seed = crate::hash::derive_seed(seed, &format!("thm1/case{i}"));
        let case = Thm1Case::random(case_seed);
        let bound = variance_bound(&case.profile, case.x_norm());
        let est = mc_output_variance(
            &case.widths,
            &case.profile,
            &case.x,
            trials,
            case_seed ^ 0x9e37_79b9_7f4a_7c15,
            case.law,
            case.activation,
        )?;
        rows.push(Thm1Row {
            case_seed,
            depth: case.profile.depth(),
            width: case.profile.width,
            bound,
            mc_variance: est.variance,
            std_error: est.std_error,
            holds: est.variance <= bound + 3.0 * est.std_error,
        });
    }
    Ok(Thm1Summary {
        configs,
        trials,
        violations: rows.iter().filter(|r| !r.holds).count(),
        max_ratio: rows
            .iter()
            .filter(|r| r.bound > 0.0)
            .map(|r| r.mc_variance / r.bound)
            .fold(0.0, f64::max),
        rows,
    })
}

/// Configurable constants that are not measured from the network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundConfig {
    pub epsilon: f64,
    #[serde(default = "default_t")]
    pub t: f64,
    #[serde(default = "default_c")]
    pub c: f64,
}

fn default_t() -> f64 {
    2.0
}

fn default_c() -> f64 {
    1.0
}

impl Default for BoundConfig {
    fn default() -> Self {
        BoundConfig {
            epsilon: 1.0,
            t: default_t(),
            c: default_c(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    pub depth: usize,
    pub b_sigma: f64,
    pub b_theta: f64,
    pub b_x: f64,
    /// Per-layer sub-Gaussian norm estimates.
    pub k_l: Vec<f64>,
    /// Per-layer `C·K(√m + √n + t)` concentration estimate of the spectral norm.
    pub concentration: Vec<f64>,
    pub c: f64,
    pub t: f64,
    pub epsilon: f64,
}

impl BoundConstants {
    /// Constants given directly, without per-layer diagnostics.
    pub fn plain(depth: usize, b_sigma: f64, b_theta: f64, b_x: f64, cfg: BoundConfig) -> Self {
        BoundConstants {
            depth,
            b_sigma,
            b_theta,
            b_x,
            k_l: Vec::new(),
            concentration: Vec::new(),
            c: cfg.c,
            t: cfg.t,
            epsilon: cfg.epsilon,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    /// `ε / (B_σ^{L−1} B_θ^L B_x) − B_σ B_θ`
    pub threshold: f64,
    /// True when the threshold is not positive.
    pub vacuous: bool,
    /// `(1 − 2e^{−t²})^L`
    pub success_probability: f64,
    /// `(1 − 2e^{−t²})^{L+1}`, for the standard-deviation form.
    pub success_probability_std: f64,
}

pub fn distance_threshold(c: &BoundConstants) -> Threshold {
    let l = c.depth as i32;
    let denom = c.b_sigma.powi(l - 1) * c.b_theta.powi(l) * c.b_x;
    let threshold = c.epsilon / denom - c.b_sigma * c.b_theta;
    let base = 1.0 - 2.0 * (-c.t * c.t).exp();
    Threshold {
        threshold,
        vacuous: !(threshold > 0.0),
        success_probability: base.powi(l),
        success_probability_std: base.powi(l + 1),
    }
}

/// Largest singular value by power iteration on `MᵀM`.
pub fn spectral_norm(m: &Tensor, iterations: usize) -> Result<f64> {
    let (rows, cols) = match m.shape() {
        [r, c] => (*r, *c),
        s => {
            return Err(Error::Dimension(format!(
                "spectral norm needs a matrix, got {s:?}"
            )))
        }
    };
    if iterations == 0 {
        return Err(Error::Contract("need at least one iteration".into()));
    }
    let a = m.data();
    if a.iter().all(|&v| v == 0.0) {
        return Ok(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v: Vec<f64> = (0..cols).map(|_| StandardNormal.sample(&mut rng)).collect();
    normalize(&mut v);
    let mut lambda = 0.0;
    let mut mv = vec![0.0; rows];
    for _ in 0..iterations {
        for (r, out) in mv.iter_mut().enumerate() {
            *out = a[r * cols..(r + 1) * cols]
                .iter()
                .zip(&v)
                .map(|(x, y)| x * y)
                .sum();
        }
        let mut w = vec![0.0; cols];
        for (r, &s) in mv.iter().enumerate() {
            for (wc, x) in w.iter_mut().zip(&a[r * cols..(r + 1) * cols]) {
                *wc += s * x;
            }
        }
        // Rayleigh quotient vᵀMᵀMv with ‖v‖ = 1
        let next: f64 = w.iter().zip(&v).map(|(x, y)| x * y).sum();
        let norm = normalize(&mut w);
        if norm == 0.0 {
            return Ok(0.0);
        }
        v = w;
        let done = (next - lambda).abs() <= 1e-8 * next.abs();
        lambda = next;
        if done {
            break;
        }
    }
    Ok(lambda.max(0.0).sqrt())
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

pub const SPECTRAL_ITERATIONS: usize = 10_000;

/// Sample standard deviation divided by `√ln 2`; exact ψ₂ norm for a
/// centred Gaussian.
pub fn subgaussian_norm(values: &[f64]) -> f64 {
    sample_variance(values).sqrt() / std::f64::consts::LN_2.sqrt()
}

/// Measures `B_x`, `B_θ` and `K_l` from a model and its data (ReLU network,
/// so `B_σ = 1`).
pub fn estimate_constants(
    params: &ParameterStore,
    data: &Dataset,
    cfg: BoundConfig,
) -> Result<BoundConstants> {
    if data.is_empty() {
        return Err(Error::Validation("empty dataset".into()));
    }
    let depth = params.layout().len();
    let mut b_theta: f64 = 0.0;
    let mut k_l = Vec::with_capacity(depth);
    let mut concentration = Vec::with_capacity(depth);
    for l in 0..depth {
        let s = spectral_norm(&params.weight_matrix(l)?, SPECTRAL_ITERATIONS)?;
        b_theta = b_theta.max(s);
        let k = subgaussian_norm(params.weights(l)?);
        let lay = params.layout()[l];
        concentration
            .push(cfg.c * k * ((lay.units as f64).sqrt() + (lay.fan_in as f64).sqrt() + cfg.t));
        k_l.push(k);
    }
    Ok(BoundConstants {
        depth,
        b_sigma: 1.0,
        b_theta,
        b_x: data.max_norm(),
        k_l,
        concentration,
        c: cfg.c,
        t: cfg.t,
        epsilon: cfg.epsilon,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDiagnostics {
    pub layer: usize,
    pub distance: f64,
    pub spectral_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub threshold: f64,
    pub vacuous: bool,
    pub empirical_distance: f64,
    /// `empirical_distance / threshold`, absent when the threshold is vacuous.
    pub slack_ratio: Option<f64>,
    pub success_probability: f64,
    pub success_probability_std: f64,
    /// `Σ_l ‖θ̃^(l) − θ̂^(l)‖`, the layerwise form of the distance.
    pub layerwise_distance_sum: f64,
    pub per_layer: Vec<LayerDiagnostics>,
    pub constants: BoundConstants,
}

pub fn slack_from_parts(empirical_distance: f64, threshold: &Threshold) -> Option<f64> {
    (!threshold.vacuous).then(|| empirical_distance / threshold.threshold)
}

pub fn slack_report(
    theta_tilde: &ParameterStore,
    theta_hat: &ParameterStore,
    constants: &BoundConstants,
) -> Result<BoundReport> {
    let empirical_distance = param_distance(theta_tilde, theta_hat, &Default::default())?;
    let th = distance_threshold(constants);
    let mut per_layer = Vec::new();
    for (l, lay) in theta_hat.layout().iter().enumerate() {
        let range = lay.weight_offset..lay.end();
        let sq: Vec<f64> = theta_tilde.values()[range.clone()]
            .iter()
            .zip(&theta_hat.values()[range])
            .map(|(a, b)| (a - b) * (a - b))
            .collect();
        per_layer.push(LayerDiagnostics {
            layer: l,
            distance: pairwise_sum(&sq).sqrt(),
            spectral_norm: spectral_norm(&theta_hat.weight_matrix(l)?, SPECTRAL_ITERATIONS)?,
        });
    }
    Ok(BoundReport {
        threshold: th.threshold,
        vacuous: th.vacuous,
        empirical_distance,
        slack_ratio: slack_from_parts(empirical_distance, &th),
        success_probability: th.success_probability,
        success_probability_std: th.success_probability_std,
        layerwise_distance_sum: per_layer.iter().map(|d| d.distance).sum(),
        per_layer,
        constants: constants.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingReport {
    pub layer: usize,
    /// Comparisons made: (row, j, k) with `‖θ_j‖₁ ≤ ‖θ_k‖₁`, `j ≠ k`.
    pub pairs: usize,
    pub respected: usize,
    pub fraction: f64,
    /// Rank correlation between predecessor-unit ℓ1 norms and the total
    /// gradient magnitude on their outgoing weights.
    pub spearman: Option<f64>,
}

/// Checks whether units of layer `layer − 1` with smaller incoming ℓ1 norm
/// receive smaller gradients on their outgoing weights in `layer`, for one
/// labelled input.
pub fn gradient_ordering_check(
    params: &ParameterStore,
    x: &[f64],
    label: usize,
    layer: usize,
) -> Result<OrderingReport> {
    if layer == 0 || layer >= params.layout().len() {
        return Err(Error::Index(format!(
            "ordering is measured on layers 1..{}, got {layer}",
            params.layout().len()
        )));
    }
    let prev = params.layout()[layer - 1];
    let cur = params.layout()[layer];
    if prev.units < 2 {
        return Err(Error::Contract("need at least two units to compare".into()));
    }
    let norms = crate::keying::unit_l1_norms(params, layer - 1)?;
    let (_, grad) = loss_and_gradient(params, x, &[label])?;
    let block = cur.fan_in / prev.units;
    // g[i][j]: gradient magnitude on the weights of row i reading unit j
    let g: Vec<Vec<f64>> = (0..cur.units)
        .map(|i| {
            let row = &grad[cur.row_range(i)];
            (0..prev.units)
                .map(|j| {
                    row[j * block..(j + 1) * block]
                        .iter()
                        .map(|v| v.abs())
                        .sum()
                })
                .collect()
        })
        .collect();
    let (mut pairs, mut respected) = (0, 0);
    for j in 0..prev.units {
        for k in 0..prev.units {
            if j == k || norms[j] > norms[k] {
                continue;
            }
            for row in &g {
                pairs += 1;
                respected += usize::from(row[j] <= row[k]);
            }
        }
    }
    let totals: Vec<f64> = (0..prev.units)
        .map(|j| g.iter().map(|r| r[j]).sum())
        .collect();
    Ok(OrderingReport {
        layer,
        pairs,
        respected,
        fraction: if pairs == 0 {
            1.0
        } else {
            respected as f64 / pairs as f64
        },
        spearman: spearman(&norms, &totals),
    })
}

/// A random ReLU network with nonnegative weights, zero biases and an input
/// in `[0, 1]^m`, used to measure gradient ordering.
#[derive(Clone, Debug)]
pub struct OrderingCase {
    pub params: ParameterStore,
    pub x: Vec<f64>,
    pub label: usize,
}

impl OrderingCase {
    /// Depth 2–3, widths 4–32, 2–10 classes. Weights are `|N(0, 2/fan_in)|`
    /// scaled per unit by a `U(0, 1]` factor.
    pub fn random(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let depth = rng.random_range(2..=3);
        let mut widths = vec![rng.random_range(4..=32)];
        widths.extend((0..depth - 1).map(|_| rng.random_range(4..=32)));
        widths.push(rng.random_range(2..=10));
        let spec = crate::network::NetworkSpec::mlp(&widths)?;
        let mut params = ParameterStore::zeros(spec, crate::network::ModelTag::Initialized)?;
        let layout = params.layout().to_vec();
        for lay in layout {
            let sd = (2.0 / lay.fan_in as f64).sqrt();
            for u in 0..lay.units {
                let scale = 1.0 - rng.random::<f64>();
                for w in &mut params.values_mut()[lay.row_range(u)] {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *w = (z * sd).abs() * scale;
                }
            }
        }
        let x = (0..widths[0]).map(|_| rng.random::<f64>()).collect();
        let label = rng.random_range(0..*widths.last().expect("classes"));
        Ok(OrderingCase { params, x, label })
    }

    /// Mean ordering fraction over layers `1..L`.
    pub fn mean_fraction(&self) -> Result<f64> {
        let fractions = (1..self.params.layout().len())
            .map(|l| Ok(gradient_ordering_check(&self.params, &self.x, self.label, l)?.fraction))
            .collect::<Result<Vec<f64>>>()?;
        Ok(mean(&fractions))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{ModelTag, NetworkSpec};

    #[test]
    fn bound_worked_values() {
        let p = VarianceProfile::uniform(1, 1, 0.25, 0.01);
        assert!((variance_bound(&p, 2.0) - 1.01).abs() < 1e-15);
        let p = VarianceProfile::uniform(2, 4, 0.1, 0.0);
        assert!((variance_bound(&p, 1.0) - 0.16).abs() < 1e-15);
        let p = VarianceProfile::uniform(3, 5, 0.0, 0.0);
        assert_eq!(variance_bound(&p, 3.0), 0.0);
    }

    #[test]
    fn bound_middle_bias_term() {
        // L = 2, only the first bias random: B² · N Var(b¹) · B² N Var(W²)
        let p = VarianceProfile {
            var_w: vec![0.0, 0.5],
            var_b: vec![0.2, 0.0],
            width: 3,
            lipschitz: 1.0,
        };
        assert!((variance_bound(&p, 1.0) - 3.0 * 0.2 * 3.0 * 0.5).abs() < 1e-15);
    }

    #[test]
    fn mc_zero_profile() {
        let p = VarianceProfile::uniform(2, 4, 0.0, 0.0);
        let e = mc_output_variance(
            &[4, 2],
            &p,
            &[1.0, 2.0],
            200,
            1,
            Law::Gaussian,
            Activation::Relu,
        )
        .unwrap();
        assert_eq!(e.variance, 0.0);
        assert!(
            mc_output_variance(&[4, 2], &p, &[1.0], 50, 1, Law::Gaussian, Activation::Relu)
                .is_err()
        );
    }

    #[test]
    fn threshold_worked_values() {
        let c = BoundConstants::plain(3, 1.0, 0.9, 1.0, BoundConfig::default());
        let th = distance_threshold(&c);
        assert!((th.threshold - (1.0 / 0.729 - 0.9)).abs() < 1e-12);
        assert!((th.threshold - 0.4717).abs() < 1e-4);
        assert!((th.success_probability - 0.894).abs() < 1e-3);
        assert!(th.success_probability_std < th.success_probability);
        let big = BoundConstants::plain(3, 1.0, 5.0, 1.0, BoundConfig::default());
        let th = distance_threshold(&big);
        assert!(th.vacuous && th.threshold < 0.0);
        assert_eq!(slack_from_parts(1.0, &th), None);
    }

    #[test]
    fn spectral_examples() {
        let d = Tensor::matrix(2, 2, vec![3.0, 0.0, 0.0, 4.0]).unwrap();
        assert!((spectral_norm(&d, 1000).unwrap() - 4.0).abs() < 1e-7);
        let z = Tensor::matrix(2, 2, vec![0.0; 4]).unwrap();
        assert_eq!(spectral_norm(&z, 10).unwrap(), 0.0);
        let id = Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((spectral_norm(&id, 10).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_units_respect_ordering() {
        let spec = NetworkSpec::mlp(&[2, 2, 2]).unwrap();
        let p = ParameterStore::from_values(
            spec,
            vec![0.5, 0.5, 0.5, 0.5, 0.0, 0.0, 1.0, -1.0, 2.0, 0.3, 0.0, 0.0],
            ModelTag::Initialized,
        )
        .unwrap();
        let r = gradient_ordering_check(&p, &[1.0, 1.0], 0, 1).unwrap();
        assert_eq!(r.respected, r.pairs);
        assert_eq!(r.pairs, 4);
    }

    #[test]
    fn dead_unit_gets_no_gradient() {
        let spec = NetworkSpec::mlp(&[2, 3, 2]).unwrap();
        let p = ParameterStore::from_values(
            spec,
            vec![
                0.0, 0.0, 1.0, 0.2, 0.3, 0.9, // W1
                0.0, 0.0, 0.0, // b1
                0.7, -0.4, 0.1, 0.2, 0.5, -0.3, // W2
                0.0, 0.0,
            ],
            ModelTag::Initialized,
        )
        .unwrap();
        let r = gradient_ordering_check(&p, &[0.6, 0.8], 1, 1).unwrap();
        // unit 0 is dead: its column is zero, so every pair (0, k) holds
        let (_, grad) = loss_and_gradient(&p, &[0.6, 0.8], &[1]).unwrap();
        let lay = p.layout()[1];
        assert_eq!(grad[lay.weight_offset], 0.0);
        assert_eq!(grad[lay.weight_offset + 3], 0.0);
        assert!(r.respected >= 4);
    }

    #[test]
    fn subgaussian_of_known_sample() {
        let s = subgaussian_norm(&[1.0, -1.0, 1.0, -1.0]);
        assert!((s - (4.0f64 / 3.0).sqrt() / std::f64::consts::LN_2.sqrt()).abs() < 1e-12);
    }
}
