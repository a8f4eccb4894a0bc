//! Randomized property suite for the Delta operator, the Householder
//! reflector, block gradients and identity-at-init.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::autograd::{AttentionLayout, Tape, Var};
use crate::data::stream_rng;
use crate::error::Result;
use crate::linalg::{
    apply_delta_block, check_delta_spectrum, delta_matrix, determinant, householder_matrix,
    orthogonality_check, DeltaSpec,
};
use crate::model::{
    block_forward, init_params, BlockVars, Model, ModelConfig, ParamStore, SublayerKind, Variant,
};
use crate::tensor::Tensor;

/// Finite-difference step for gradient checks.
pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FamilyResult {
    pub name: &'static str,
    pub cases: usize,
    pub passed: usize,
    /// Largest observed deviation.
    pub worst: f64,
    pub tolerance: f64,
}

impl FamilyResult {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Self {
            name,
            cases: 0,
            passed: 0,
            worst: 0.0,
            tolerance,
        }
    }

    fn record(&mut self, deviation: f64) {
        self.cases += 1;
        if deviation <= self.tolerance {
            self.passed += 1;
        }
        self.worst = if deviation.is_nan() {
            f64::NAN
        } else {
            self.worst.max(deviation)
        };
    }

    /// Records a boolean outcome with no numeric deviation.
    fn record_bool(&mut self, ok: bool) {
        self.record(if ok { 0.0 } else { f64::INFINITY });
    }

    pub fn ok(&self) -> bool {
        self.cases > 0 && self.passed == self.cases
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyReport {
    pub families: Vec<FamilyResult>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.families.iter().all(FamilyResult::ok)
    }

    pub fn family(&self, name: &str) -> Option<&FamilyResult> {
        self.families.iter().find(|f| f.name == name)
    }
}

/// Case counts per family.
#[derive(Clone, Copy, Debug)]
pub struct VerifySizes {
    pub spectral: usize,
    pub householder: usize,
    pub additive: usize,
    pub tangent: usize,
}

impl Default for VerifySizes {
    fn default() -> Self {
        Self {
            spectral: 200,
            householder: 100,
            additive: 100,
            tangent: 100,
        }
    }
}

fn normal_vec<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn random_spec<R: Rng>(rng: &mut R, max_dim: usize) -> Result<DeltaSpec> {
    let d = rng.random_range(2..=max_dim);
    let beta = rng.random_range(-1.0..=2.5);
    DeltaSpec::new(beta, &normal_vec(rng, d))
}

fn spectral_family(seed: u64, cases: usize) -> Result<FamilyResult> {
    let mut rng = stream_rng("verify-spectral", &[seed]);
    let mut family = FamilyResult::new("spectral", 1e-8);
    for _ in 0..cases {
        let spec = random_spec(&mut rng, 64)?;
        family.record(check_delta_spectrum(&spec)?.max());
    }
    Ok(family)
}

fn householder_families(seed: u64, cases: usize) -> Result<(FamilyResult, FamilyResult)> {
    let mut rng = stream_rng("verify-householder", &[seed]);
    let mut structure = FamilyResult::new("householder", 1e-12);
    let mut det = FamilyResult::new("householder_det", 1e-8);
    for _ in 0..cases {
        let d = rng.random_range(2..=64);
        let h = householder_matrix(&normal_vec(&mut rng, d))?;
        let ht = h.transpose()?;
        let eye = Tensor::eye(d);
        let symmetry = h.max_abs_diff(&ht)?;
        let orthogonality = ht.matmul(&h)?.max_abs_diff(&eye)?;
        let involution = h.matmul(&h)?.max_abs_diff(&eye)?;
        structure.record(symmetry.max(orthogonality).max(involution));
        det.record((determinant(&h)? + 1.0).abs());
    }
    Ok((structure, det))
}

fn additive_family(seed: u64, cases: usize) -> Result<FamilyResult> {
    let mut rng = stream_rng("verify-additive", &[seed]);
    let mut family = FamilyResult::new("additive", 1e-12);
    for _ in 0..cases {
        let spec = random_spec(&mut rng, 64)?;
        let d = spec.dim();
        let dv = rng.random_range(1..=16);
        let x = Tensor::new(vec![d, dv], normal_vec(&mut rng, d * dv))?;
        let v = Tensor::vector(normal_vec(&mut rng, dv));
        let additive = apply_delta_block(&x, &spec, &v)?;
        let mut matrix = delta_matrix(&spec).matmul(&x)?;
        let k = spec.direction();
        for i in 0..d {
            for j in 0..dv {
                let e = matrix.at(i, j) + spec.beta() * k[i] * v.data()[j];
                matrix.set(i, j, e);
            }
        }
        family.record(additive.max_abs_diff(&matrix)?);
    }
    Ok(family)
}

fn tangent_family(seed: u64, cases: usize) -> Result<FamilyResult> {
    let mut rng = stream_rng("verify-tangent", &[seed]);
    let mut family = FamilyResult::new("tangent_complement", 1e-12);
    for _ in 0..cases {
        let spec = random_spec(&mut rng, 64)?;
        let k = spec.direction();
        let mut u = normal_vec(&mut rng, spec.dim());
        let along: f64 = u.iter().zip(k).map(|(a, b)| a * b).sum();
        for (ui, ki) in u.iter_mut().zip(k) {
            *ui -= along * ki;
        }
        let a = delta_matrix(&spec);
        let ut = Tensor::new(vec![spec.dim(), 1], u.clone())?;
        let au = a.matmul(&ut)?;
        let err = au
            .data()
            .iter()
            .zip(&u)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        family.record(err);
    }
    Ok(family)
}

/// `AᵀA = I` must hold exactly when `|1 − β| = 1`.
fn orthogonality_family(seed: u64) -> Result<FamilyResult> {
    let mut rng = stream_rng("verify-orthogonality", &[seed]);
    let mut family = FamilyResult::new("orthogonality_condition", 0.0);
    let mut betas = vec![0.0, 2.0, 1.0, 0.5, -1.0, 2.5];
    betas.extend((0..20).map(|_| rng.random_range(-1.0..=2.5)));
    for beta in betas {
        let d = rng.random_range(2..=32);
        let spec = DeltaSpec::new(beta, &normal_vec(&mut rng, d))?;
        let a = delta_matrix(&spec);
        let deviation = a.transpose()?.matmul(&a)?.max_abs_diff(&Tensor::eye(d))?;
        let predicted = orthogonality_check(beta);
        let observed = deviation <= 1e-12;
        family.record_bool(predicted == observed);
    }
    Ok(family)
}

/// Configuration of the small layer used by [`gradient_check_layer`].
pub fn gradient_check_config() -> ModelConfig {
    ModelConfig {
        depth: 1,
        width: 8,
        heads: 2,
        ffn_mult: 2,
        vocab: 4,
        seq_len: 3,
        variant: Variant::MgtFull,
        lambda: 1.0,
        epsilon: 0.1,
        alpha_init: 0.0,
        seed: 0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradientCheck {
    pub max_relative_error: f64,
    pub entries: usize,
    /// Parameter holding the largest error.
    pub worst_param: String,
}

/// Layer-pair parameters with every entry randomized, so no gate sits at a
/// special point.
fn randomized_layer(config: &ModelConfig, seed: u64) -> Result<ParamStore> {
    let mut params = init_params(config)?;
    let mut rng = stream_rng("verify-gradient", &[seed]);
    for (name, t) in params.iter_mut() {
        if name.starts_with("block") {
            for x in t.data_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x = 0.5 * z;
            }
        }
    }
    Ok(params)
}

fn layer_loss(
    config: &ModelConfig,
    params: &ParamStore,
    x: &Tensor,
    weights: &Tensor,
) -> Result<f64> {
    let mut tape = Tape::new();
    let (loss, _) = layer_graph(&mut tape, config, params, x, weights)?;
    Ok(tape.value(loss).data()[0])
}

fn layer_graph(
    tape: &mut Tape,
    config: &ModelConfig,
    params: &ParamStore,
    x: &Tensor,
    weights: &Tensor,
) -> Result<(Var, Vec<(String, Var)>)> {
    let bound = params.bind(tape);
    let xv = tape.param(x.clone());
    let layout = AttentionLayout {
        batch: 1,
        seq: config.seq_len,
        heads: config.heads,
        causal: true,
    };
    let mut h = xv;
    for kind in [SublayerKind::Attention, SublayerKind::FeedForward] {
        let vars = BlockVars::resolve(
            &bound,
            &format!("block0.{}", kind.tag()),
            kind,
            config.variant,
        )?;
        h = block_forward(
            tape,
            h,
            &vars,
            config.variant,
            config.lambda,
            config.epsilon,
            layout,
        )?
        .out;
    }
    let w = tape.constant(weights.clone());
    let prod = tape.mul(h, w)?;
    let loss = tape.sum(prod)?;
    let mut handles: Vec<(String, Var)> = bound
        .iter()
        .filter(|(n, _)| n.starts_with("block"))
        .map(|(n, &v)| (n.clone(), v))
        .collect();
    handles.push(("input".to_string(), xv));
    Ok((loss, handles))
}

/// Autodiff vs. central differences for every parameter and the input of
/// one mgt_full attention+FFN layer pair (`S = 3, D = 8, h = 2`).
pub fn gradient_check_layer(seed: u64) -> Result<GradientCheck> {
    let config = gradient_check_config();
    let mut params = randomized_layer(&config, seed)?;
    let mut rng = stream_rng("verify-gradient-input", &[seed]);
    let (s, d) = (config.seq_len, config.width);
    let mut x = Tensor::new(vec![s, d], normal_vec(&mut rng, s * d))?;
    let weights = Tensor::new(vec![s, d], normal_vec(&mut rng, s * d))?;

    let mut tape = Tape::new();
    let (loss, handles) = layer_graph(&mut tape, &config, &params, &x, &weights)?;
    let grads = tape.backward(loss)?;

    let mut check = GradientCheck {
        max_relative_error: 0.0,
        entries: 0,
        worst_param: String::new(),
    };
    for (name, var) in handles {
        let analytic = grads
            .get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(var).shape()));
        for i in 0..analytic.len() {
            let numeric = {
                let mut probe = |delta: f64| -> Result<f64> {
                    if name == "input" {
                        x.data_mut()[i] += delta;
                        let l = layer_loss(&config, &params, &x, &weights);
                        x.data_mut()[i] -= delta;
                        l
                    } else {
                        params.get_mut(&name)?.data_mut()[i] += delta;
                        let l = layer_loss(&config, &params, &x, &weights);
                        params.get_mut(&name)?.data_mut()[i] -= delta;
                        l
                    }
                };
                (probe(FD_STEP)? - probe(-FD_STEP)?) / (2.0 * FD_STEP)
            };
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            check.entries += 1;
            if !(err <= check.max_relative_error) {
                check.max_relative_error = err;
                check.worst_param = name.clone();
            }
        }
    }
    Ok(check)
}

/// Largest `|f(X) − X|` of an untrained mgt_full stack of `depth` pairs.
pub fn identity_at_init_deviation(depth: usize, seed: u64) -> Result<f64> {
    let config = ModelConfig {
        depth,
        width: 32,
        heads: 4,
        ffn_mult: 2,
        seq_len: 9,
        variant: Variant::MgtFull,
        epsilon: 0.0,
        seed,
        ..ModelConfig::default()
    };
    let model = Model::new(config)?;
    let (batch, seq) = (2, 9);
    let mut rng = stream_rng("verify-identity", &[seed]);
    let x = Tensor::new(
        vec![batch * seq, 32],
        normal_vec(&mut rng, batch * seq * 32),
    )?;
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape);
    let input = tape.constant(x.clone());
    let layout = AttentionLayout {
        batch,
        seq,
        heads: 4,
        causal: true,
    };
    let (out, _) = model.run_blocks(&mut tape, &bound, input, layout, false)?;
    tape.value(out).max_abs_diff(&x)
}

/// Runs every property family.
pub fn run_verify(seed: u64, sizes: VerifySizes) -> Result<VerifyReport> {
    let mut families = vec![spectral_family(seed, sizes.spectral)?];
    let (structure, det) = householder_families(seed, sizes.householder)?;
    families.push(structure);
    families.push(det);
    families.push(additive_family(seed, sizes.additive)?);
    families.push(tangent_family(seed, sizes.tangent)?);
    families.push(orthogonality_family(seed)?);

    let mut gradient = FamilyResult::new("gradient", 1e-4);
    gradient.record(gradient_check_layer(seed)?.max_relative_error);
    families.push(gradient);

    let mut identity = FamilyResult::new("identity_at_init", 1e-12);
    identity.record(identity_at_init_deviation(16, seed)?);
    families.push(identity);
    Ok(VerifyReport { families })
}
