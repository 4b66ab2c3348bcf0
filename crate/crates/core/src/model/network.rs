use rand::Rng;

use super::{Bound, ModelConfig, Variant};
use crate::autodiff::{Padding, Real, Reduction, Tape, Var};
use crate::error::{Error, Result};
use crate::flow::NET_INPUT_SIZE;

/// Tape handles of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Shared feature `[N, shared_dim]`.
    pub z: Var,
    /// Attention maps `[N, shared_dim]`, one per class (empty unless the
    /// variant uses attention).
    pub attention: Vec<Var>,
    /// Expression-specific features, one per class (empty for BASIC).
    pub specific: Vec<Var>,
    /// Detector probabilities `[N, K]` (absent for BASIC).
    pub detector_probs: Option<Var>,
    /// Classifier input.
    pub fused: Var,
    pub logits: Var,
}

fn conv_relu<T: Real>(tape: &mut Tape<'_, T>, p: &Bound<'_>, name: &str, x: Var) -> Result<Var> {
    let y = tape.conv2d(
        x,
        p.var(&format!("{name}.w"))?,
        p.var(&format!("{name}.b"))?,
        Padding::Same,
    )?;
    Ok(tape.relu(y))
}

fn dense<T: Real>(tape: &mut Tape<'_, T>, p: &Bound<'_>, name: &str, x: Var) -> Result<Var> {
    tape.dense(x, p.var(&format!("{name}.w"))?, p.var(&format!("{name}.b"))?)
}

/// Four-branch Inception block: 1×1, 1×1→3×3, 1×1→5×5 and 3×3 max-pool→1×1,
/// concatenated along channels.
fn inception<T: Real>(tape: &mut Tape<'_, T>, p: &Bound<'_>, prefix: &str, x: Var) -> Result<Var> {
    let b1 = conv_relu(tape, p, &format!("{prefix}.b1"), x)?;
    let r2 = conv_relu(tape, p, &format!("{prefix}.b2r"), x)?;
    let b2 = conv_relu(tape, p, &format!("{prefix}.b2"), r2)?;
    let r3 = conv_relu(tape, p, &format!("{prefix}.b3r"), x)?;
    let b3 = conv_relu(tape, p, &format!("{prefix}.b3"), r3)?;
    let pooled = tape.max_pool2d(x, 3, 1, Padding::Same)?;
    let b4 = conv_relu(tape, p, &format!("{prefix}.b4"), pooled)?;
    tape.concat(&[b1, b2, b3, b4], 1)
}

fn stream<T: Real>(tape: &mut Tape<'_, T>, p: &Bound<'_>, name: &str, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 || s[1] != 1 || s[2] != NET_INPUT_SIZE || s[3] != NET_INPUT_SIZE {
        return Err(Error::shape(
            "stream input",
            &s,
            &[0, 1, NET_INPUT_SIZE, NET_INPUT_SIZE],
        ));
    }
    let h = inception(tape, p, &format!("{name}.inc1"), x)?;
    let h = tape.max_pool2d(h, 2, 2, Padding::Valid)?;
    let h = inception(tape, p, &format!("{name}.inc2"), h)?;
    let h = tape.max_pool2d(h, 2, 2, Padding::Valid)?;
    tape.flatten(h)
}

/// Two-stream backbone: per-stream Inception features, concatenated and
/// projected to the shared feature `z`.
pub fn forward_shared<T: Real>(tape: &mut Tape<'_, T>, p: &Bound<'_>, u: Var, v: Var) -> Result<Var> {
    if tape.shape(u) != tape.shape(v) {
        return Err(Error::shape("forward_shared", tape.shape(u), tape.shape(v)));
    }
    let fu = stream(tape, p, "u", u)?;
    let fv = stream(tape, p, "v", v)?;
    let both = tape.concat(&[fu, fv], 1)?;
    let z = dense(tape, p, "shared", both)?;
    Ok(tape.relu(z))
}

/// Expression-specific features and detector probabilities `[N, K]`.
///
/// Returns `(attention maps, specific features, detector probabilities)`;
/// attention maps are empty for the fully connected variant.
pub fn propose<T: Real>(
    tape: &mut Tape<'_, T>,
    p: &Bound<'_>,
    config: &ModelConfig,
    z: Var,
) -> Result<(Vec<Var>, Vec<Var>, Var)> {
    if !config.variant.has_branches() {
        return Err(Error::Usage("the BASIC variant has no proposal branches".into()));
    }
    let k = config.num_classes;
    let mut attention = Vec::with_capacity(k);
    let mut specific = Vec::with_capacity(k);
    let mut probs = Vec::with_capacity(k);
    for i in 0..k {
        let logits = dense(tape, p, &format!("att{i}"), z)?;
        let zk = if config.variant.uses_attention() {
            let a = tape.softmax(logits, 1)?;
            attention.push(a);
            tape.mul(a, z)?
        } else {
            tape.relu(logits)
        };
        let h = dense(tape, p, &format!("det{i}.h"), zk)?;
        let h = tape.relu(h);
        let o = dense(tape, p, &format!("det{i}.o"), h)?;
        probs.push(tape.sigmoid(o));
        specific.push(zk);
    }
    let probs = tape.concat(&probs, 1)?;
    Ok((attention, specific, probs))
}

/// Aggregates the expression-specific features: element-wise sum, or
/// concatenation for the concatenating variant.
pub fn fuse<T: Real>(tape: &mut Tape<'_, T>, variant: Variant, specific: &[Var]) -> Result<Var> {
    match variant {
        Variant::FrConcat => tape.concat(specific, 1),
        _ => tape.add(specific),
    }
}

/// Classifier head: dense → relu → dropout → dense, returning logits.
pub fn classify<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<'_, T>,
    p: &Bound<'_>,
    config: &ModelConfig,
    fused: Var,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let h = dense(tape, p, "cls.h", fused)?;
    let h = tape.relu(h);
    let h = tape.dropout(h, config.dropout_p, training, rng)?;
    dense(tape, p, "cls.o", h)
}

/// Full forward pass for `[N, 1, 28, 28]` horizontal and vertical flow inputs.
pub fn forward<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<'_, T>,
    p: &Bound<'_>,
    config: &ModelConfig,
    u: Var,
    v: Var,
    training: bool,
    rng: &mut R,
) -> Result<ForwardOutput> {
    let z = forward_shared(tape, p, u, v)?;
    let (attention, specific, detector_probs, fused) = if config.variant.has_branches() {
        let (a, s, probs) = propose(tape, p, config, z)?;
        let fused = fuse(tape, config.variant, &s)?;
        (a, s, Some(probs), fused)
    } else {
        (Vec::new(), Vec::new(), None, z)
    };
    let logits = classify(tape, p, config, fused, training, rng)?;
    Ok(ForwardOutput {
        z,
        attention,
        specific,
        detector_probs,
        fused,
        logits,
    })
}

/// Mean over the K detectors of the one-vs-rest binary cross-entropy.
pub fn proposal_loss<T: Real>(
    tape: &mut Tape<'_, T>,
    probs: Var,
    labels: &[usize],
    reduction: Reduction,
) -> Result<Var> {
    let s = tape.shape(probs).to_vec();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::shape("proposal_loss", &s, &[labels.len()]));
    }
    let k = s[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Data(format!("class index {bad} out of range for {k} classes")));
    }
    let columns = tape.split(probs, 1, &vec![1; k])?;
    let mut losses = Vec::with_capacity(k);
    for (class, col) in columns.into_iter().enumerate() {
        let targets: Vec<T> = labels
            .iter()
            .map(|&l| if l == class { T::one() } else { T::zero() })
            .collect();
        losses.push(tape.binary_cross_entropy(col, &targets, reduction)?);
    }
    let total = tape.add(&losses)?;
    Ok(tape.scale(total, T::one() / T::from_usize(k).expect("class count fits")))
}

/// `λ · L_prop + L_cls`.
pub fn total_loss<T: Real>(tape: &mut Tape<'_, T>, l_prop: Var, l_cls: Var, lambda: f64) -> Result<Var> {
    if lambda.is_nan() || lambda < 0.0 {
        return Err(Error::Config(format!("lambda must be non-negative, got {lambda}")));
    }
    let weighted = tape.scale(l_prop, T::from_f64_lossy(lambda));
    tape.add(&[weighted, l_cls])
}

/// Joint training loss of a forward pass; the BASIC variant uses the
/// classification term alone.
pub fn joint_loss<T: Real>(
    tape: &mut Tape<'_, T>,
    config: &ModelConfig,
    out: &ForwardOutput,
    labels: &[usize],
) -> Result<Var> {
    let l_cls = tape.softmax_cross_entropy(out.logits, labels, config.loss_reduction)?;
    match out.detector_probs {
        Some(probs) => {
            let l_prop = proposal_loss(tape, probs, labels, config.loss_reduction)?;
            total_loss(tape, l_prop, l_cls, config.lambda)
        }
        None => Ok(l_cls),
    }
}
