//! Knowledge-word pooled hidden-state and attention distillation losses.
//!
//! For every knowledge word `j` of an example, the student's and teacher's
//! hidden vectors at the word's subword positions are averaged into one row,
//! and likewise the attention rows of those query positions (averaged over
//! heads as well). The per-layer loss is an MSE between the stacked rows;
//! the embedding layer contributes only the hidden-state term.
//!
//! Batches mix examples with different numbers of knowledge words, so the
//! knowledge axis is padded to the batch maximum and padded rows are masked
//! out of every mean.

use std::fmt;

use crate::encoder::{Encoder, EncoderOutput, IdBatch};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};
use crate::textprep::KnowledgeMask;

/// Weights on the hidden-state (`alpha`) and attention (`beta`) terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.6,
            beta: 0.2,
        }
    }
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        for (name, v) in [("alpha", alpha), ("beta", beta)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        Ok(LossWeights { alpha, beta })
    }
}

impl fmt::Display for LossWeights {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "alpha={} beta={}", self.alpha, self.beta)
    }
}

/// Averaging weights that turn `(batch, len, ·)` token rows into
/// `(batch, k_max, ·)` knowledge-word rows.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolingPlan {
    /// `(batch, k_max, len)`; row `j` of example `b` holds `1/n` on the `n`
    /// positions of knowledge word `j + 1`.
    weights: Tensor,
    /// `batch * k_max` flags; row `j` of example `b` is valid iff that
    /// example has at least `j + 1` knowledge words.
    valid: Vec<bool>,
    k_max: usize,
}

impl PoolingPlan {
    /// `len` is the sequence length of the tensors that will be pooled; masks
    /// may be longer as long as their extra positions carry no knowledge.
    pub fn new(masks: &[&KnowledgeMask], len: usize) -> Result<Self> {
        let batch = masks.len();
        for m in masks {
            if m.len() < len || m.values()[len..].iter().any(|&v| v != 0) {
                return Err(Error::dim(format!(
                    "knowledge mask of length {} does not fit sequence length {len}",
                    m.len()
                )));
            }
        }
        let k_max = masks.iter().map(|m| m.k()).max().unwrap_or(0);
        let mut weights = vec![0.0; batch * k_max * len];
        let mut valid = vec![false; batch * k_max];
        for (b, m) in masks.iter().enumerate() {
            let mut counts = vec![0usize; m.k()];
            for &v in &m.values()[..len] {
                if v > 0 {
                    counts[v as usize - 1] += 1;
                }
            }
            for (pos, &v) in m.values()[..len].iter().enumerate() {
                if v > 0 {
                    let j = v as usize - 1;
                    weights[(b * k_max + j) * len + pos] = 1.0 / counts[j] as f64;
                }
            }
            for j in 0..m.k() {
                valid[b * k_max + j] = true;
            }
        }
        Ok(PoolingPlan {
            weights: Tensor::new(vec![batch, k_max, len], weights)?,
            valid,
            k_max,
        })
    }

    pub fn batch(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn is_empty(&self) -> bool {
        self.k_max == 0
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    fn check(&self, what: &str, shape: &[usize]) -> Result<()> {
        let ok = shape.len() >= 3 && shape[0] == self.batch() && shape[shape.len() - 2] == self.len();
        if ok {
            Ok(())
        } else {
            Err(Error::dim(format!(
                "{what}: tensor {shape:?} does not match pooling plan (batch {}, len {})",
                self.batch(),
                self.len()
            )))
        }
    }
}

/// `H (batch, len, d)` to per-knowledge-word means `(batch, k_max, d)`.
pub fn pool_hidden(g: &mut Graph, hidden: Var, plan: &PoolingPlan) -> Result<Var> {
    plan.check("pool_hidden", g.shape(hidden))?;
    if g.shape(hidden).len() != 3 {
        return Err(Error::dim("pool_hidden expects (batch, len, d)"));
    }
    let w = g.constant(plan.weights.clone());
    g.matmul(w, hidden)
}

/// `A (batch, heads, len, len)` to `(batch, k_max, len)`: the attention rows
/// of each knowledge word's query positions, averaged over heads and over
/// those positions. The key axis is kept.
pub fn pool_attention(g: &mut Graph, attn: Var, plan: &PoolingPlan) -> Result<Var> {
    let s = g.shape(attn).to_vec();
    if s.len() != 4 || s[2] != s[3] {
        return Err(Error::dim(format!(
            "pool_attention expects (batch, heads, len, len), got {s:?}"
        )));
    }
    plan.check("pool_attention", &s)?;
    let per_query = g.mean_axis(attn, 1)?;
    let w = g.constant(plan.weights.clone());
    g.matmul(w, per_query)
}

/// Detached teacher targets: pooled hidden rows for layers `0..=P` and pooled
/// attention rows for blocks `1..=P`.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledTargets {
    pub hidden: Vec<Tensor>,
    pub attn: Vec<Tensor>,
}

impl PooledTargets {
    /// Pools captured outputs recorded on `g` and copies the values out, so
    /// no gradient can flow back into whatever produced them.
    pub fn detach(g: &mut Graph, out: &EncoderOutput, plan: &PoolingPlan) -> Result<Self> {
        if out.hidden.is_empty() {
            return Err(Error::State("teacher forward ran without capture".into()));
        }
        let mut hidden = Vec::with_capacity(out.hidden.len());
        for &h in &out.hidden {
            let p = pool_hidden(g, h, plan)?;
            hidden.push(g.value(p).clone());
        }
        let mut attn = Vec::with_capacity(out.attn.len());
        for &a in &out.attn {
            let p = pool_attention(g, a, plan)?;
            attn.push(g.value(p).clone());
        }
        Ok(PooledTargets { hidden, attn })
    }

    /// Runs a dropout-free teacher pass and pools its outputs.
    pub fn from_teacher(teacher: &Encoder, batch: &IdBatch, plan: &PoolingPlan) -> Result<Self> {
        let mut g = Graph::new();
        let params: Vec<Var> = teacher
            .params()
            .iter()
            .map(|p| g.constant(p.value.clone()))
            .collect();
        let out = teacher.forward(&mut g, &params, batch, true, None)?;
        Self::detach(&mut g, &out, plan)
    }
}

/// Loss of one layer: `alpha * hidden MSE`, plus `beta * attention MSE` for
/// encoder blocks (`p > 0`).
#[derive(Clone, Copy, Debug)]
pub struct LayerLoss {
    pub hidden: Var,
    pub attention: Option<Var>,
    pub total: Var,
}

pub fn layer_loss(
    g: &mut Graph,
    student: &EncoderOutput,
    targets: &PooledTargets,
    plan: &PoolingPlan,
    p: usize,
    w: LossWeights,
) -> Result<LayerLoss> {
    Ok(layer_loss_parts(g, student, targets, plan, p, w, true, true)?.expect("both terms enabled"))
}

#[allow(clippy::too_many_arguments)]
fn layer_loss_parts(
    g: &mut Graph,
    student: &EncoderOutput,
    targets: &PooledTargets,
    plan: &PoolingPlan,
    p: usize,
    w: LossWeights,
    use_hidden: bool,
    use_attention: bool,
) -> Result<Option<LayerLoss>> {
    if student.hidden.is_empty() {
        return Err(Error::State("student forward ran without capture".into()));
    }
    let layers = student.hidden.len() - 1;
    if p > layers || targets.hidden.len() != layers + 1 || targets.attn.len() != layers {
        return Err(Error::dim(format!(
            "layer {p} requested; student has {layers} blocks, targets have {} hidden / {} attention",
            targets.hidden.len(),
            targets.attn.len()
        )));
    }
    let hidden = if use_hidden {
        let s = pool_hidden(g, student.hidden[p], plan)?;
        let t = g.constant(targets.hidden[p].clone());
        let mse = g.mse(s, t, Some(plan.valid()))?;
        Some(g.scale(mse, w.alpha))
    } else {
        None
    };
    let attention = if use_attention && p > 0 {
        let s = pool_attention(g, student.attn[p - 1], plan)?;
        let t = g.constant(targets.attn[p - 1].clone());
        let mse = g.mse(s, t, Some(plan.valid()))?;
        Some(g.scale(mse, w.beta))
    } else {
        None
    };
    let total = match (hidden, attention) {
        (Some(h), Some(a)) => g.add(h, a)?,
        (Some(h), None) => h,
        (None, Some(a)) => a,
        (None, None) => return Ok(None),
    };
    Ok(Some(LayerLoss {
        hidden: hidden.unwrap_or(total),
        attention,
        total,
    }))
}

/// Value of each loss component for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub pred: f64,
    /// Sum over layers of the alpha-weighted hidden terms.
    pub hidn: f64,
    /// Sum over blocks of the beta-weighted attention terms.
    pub attn: f64,
    pub total: f64,
}

/// Which distillation terms are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossSwitches {
    pub hidn: bool,
    pub attn: bool,
}

impl Default for LossSwitches {
    fn default() -> Self {
        LossSwitches {
            hidn: true,
            attn: true,
        }
    }
}

/// Cross-entropy on the student's logits plus, when `targets` is given, the
/// enabled distillation terms summed over every layer.
pub fn total_loss(
    g: &mut Graph,
    student: &EncoderOutput,
    targets: Option<&PooledTargets>,
    labels: &[usize],
    plan: &PoolingPlan,
    w: LossWeights,
    switches: LossSwitches,
) -> Result<(Var, LossBreakdown)> {
    let pred = g.cross_entropy(student.logits, labels)?;
    let mut breakdown = LossBreakdown {
        pred: g.value(pred).item(),
        ..Default::default()
    };
    let mut total = pred;
    if let Some(targets) = targets.filter(|_| switches.hidn || switches.attn) {
        let layers = targets.attn.len();
        for p in 0..=layers {
            let Some(ll) = layer_loss_parts(g, student, targets, plan, p, w, switches.hidn, switches.attn)?
            else {
                continue;
            };
            if switches.hidn {
                breakdown.hidn += g.value(ll.hidden).item();
            }
            if let Some(a) = ll.attention {
                breakdown.attn += g.value(a).item();
            }
            total = g.add(total, ll.total)?;
        }
    }
    breakdown.total = g.value(total).item();
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn mask(v: &[u32]) -> KnowledgeMask {
        KnowledgeMask::from_values(v.to_vec()).unwrap()
    }

    #[test]
    fn singleton_and_pair_means() {
        let mut g = Graph::new();
        // one example, len 4, d 2: word 1 = position 1, word 2 = positions 2,3
        let h = g.constant(
            Tensor::new(vec![1, 4, 2], vec![9.0, 9.0, 5.0, -1.0, 1.0, 1.0, 3.0, 3.0]).unwrap(),
        );
        let m = mask(&[0, 1, 2, 2]);
        let plan = PoolingPlan::new(&[&m], 4).unwrap();
        let p = pool_hidden(&mut g, h, &plan).unwrap();
        assert_eq!(g.value(p).data(), &[5.0, -1.0, 2.0, 2.0]);
    }

    #[test]
    fn examples_without_knowledge_contribute_nothing() {
        let a = mask(&[0, 1, 0]);
        let b = mask(&[0, 0, 0]);
        let plan = PoolingPlan::new(&[&a, &b], 3).unwrap();
        assert_eq!(plan.k_max(), 1);
        assert_eq!(plan.valid(), &[true, false]);
        let mut g = Graph::new();
        let h = g.constant(Tensor::full(&[2, 3, 2], 7.0));
        let p = pool_hidden(&mut g, h, &plan).unwrap();
        assert_eq!(&g.value(p).data()[2..], &[0.0, 0.0]);
    }

    #[test]
    fn attention_pooling_averages_heads() {
        let mut g = Graph::new();
        let mut data = vec![0.0; 2 * 3 * 3];
        // head 0 row 1 and head 1 row 1
        data[3..6].copy_from_slice(&[0.2, 0.3, 0.5]);
        data[9 + 3..9 + 6].copy_from_slice(&[0.6, 0.1, 0.3]);
        let a = g.constant(Tensor::new(vec![1, 2, 3, 3], data).unwrap());
        let m = mask(&[0, 1, 0]);
        let plan = PoolingPlan::new(&[&m], 3).unwrap();
        let p = pool_attention(&mut g, a, &plan).unwrap();
        let v = g.value(p).data();
        for (got, want) in v.iter().zip([0.4, 0.2, 0.4]) {
            assert!((got - want).abs() < 1e-15);
        }

        let mut g = Graph::new();
        let u = g.constant(Tensor::new(vec![1, 1, 3, 3], [1.0 / 3.0; 9].to_vec()).unwrap());
        let p = pool_attention(&mut g, u, &plan).unwrap();
        assert_eq!(g.value(p).data(), &[1.0 / 3.0; 3]);
    }

    #[test]
    fn mask_length_mismatch_is_dimension_error() {
        let m = mask(&[0, 1]);
        assert!(matches!(PoolingPlan::new(&[&m], 3), Err(Error::Dimension(_))));
        let plan = PoolingPlan::new(&[&m], 2).unwrap();
        let mut g = Graph::new();
        let h = g.constant(Tensor::zeros(&[1, 3, 2]));
        assert!(matches!(pool_hidden(&mut g, h, &plan), Err(Error::Dimension(_))));
    }

    fn micro(seed: u64) -> Encoder {
        Encoder::new(
            EncoderConfig {
                layers: 2,
                hidden: 8,
                heads: 2,
                max_len: 8,
                ffn_mult: 2,
                vocab_size: 12,
                dropout: 0.0,
            },
            seed,
        )
        .unwrap()
    }

    fn fixture() -> (IdBatch, Vec<KnowledgeMask>) {
        let r1 = [1u32, 5, 6, 7, 8, 2, 0, 0];
        let r2 = [1u32, 9, 10, 2, 0, 0, 0, 0];
        let m1 = mask(&[0, 1, 1, 0, 2, 0, 0, 0]);
        let m2 = mask(&[0, 0, 1, 0, 0, 0, 0, 0]);
        (IdBatch::new(&[&r1, &r2]).unwrap(), vec![m1, m2])
    }

    #[test]
    fn identical_models_have_zero_distillation() {
        let student = micro(1);
        let teacher = student.clone().freeze();
        let (batch, masks) = fixture();
        let refs: Vec<&KnowledgeMask> = masks.iter().collect();
        let plan = PoolingPlan::new(&refs, batch.len).unwrap();
        let targets = PooledTargets::from_teacher(&teacher, &batch, &plan).unwrap();
        let mut g = Graph::new();
        let params = student.bind(&mut g);
        let out = student.forward(&mut g, &params, &batch, true, None).unwrap();
        for p in 0..=2 {
            let ll = layer_loss(&mut g, &out, &targets, &plan, p, LossWeights::default()).unwrap();
            assert_eq!(g.value(ll.total).item(), 0.0);
        }
        let (total, br) = total_loss(
            &mut g,
            &out,
            Some(&targets),
            &[1, 0],
            &plan,
            LossWeights::new(1.0, 1.0).unwrap(),
            LossSwitches::default(),
        )
        .unwrap();
        assert_eq!(g.value(total).item(), br.pred);
    }

    #[test]
    fn embedding_layer_ignores_beta_and_zero_weights_vanish() {
        let student = micro(1);
        let teacher = micro(2).freeze();
        let (batch, masks) = fixture();
        let refs: Vec<&KnowledgeMask> = masks.iter().collect();
        let plan = PoolingPlan::new(&refs, batch.len).unwrap();
        let targets = PooledTargets::from_teacher(&teacher, &batch, &plan).unwrap();
        let mut g = Graph::new();
        let params = student.bind(&mut g);
        let out = student.forward(&mut g, &params, &batch, true, None).unwrap();
        let a = layer_loss(&mut g, &out, &targets, &plan, 0, LossWeights::new(0.6, 0.0).unwrap()).unwrap();
        let b = layer_loss(&mut g, &out, &targets, &plan, 0, LossWeights::new(0.6, 1e6).unwrap()).unwrap();
        assert!(a.attention.is_none());
        assert_eq!(g.value(a.total).item(), g.value(b.total).item());
        assert!(g.value(a.total).item() > 0.0);
        for p in 0..=2 {
            let z = layer_loss(&mut g, &out, &targets, &plan, p, LossWeights::new(0.0, 0.0).unwrap()).unwrap();
            assert_eq!(g.value(z.total).item(), 0.0);
        }
    }

    #[test]
    fn switches_off_means_prediction_only() {
        let student = micro(1);
        let teacher = micro(2).freeze();
        let (batch, masks) = fixture();
        let refs: Vec<&KnowledgeMask> = masks.iter().collect();
        let plan = PoolingPlan::new(&refs, batch.len).unwrap();
        let targets = PooledTargets::from_teacher(&teacher, &batch, &plan).unwrap();
        let mut g = Graph::new();
        let params = student.bind(&mut g);
        let out = student.forward(&mut g, &params, &batch, true, None).unwrap();
        let off = LossSwitches { hidn: false, attn: false };
        let (total, br) = total_loss(&mut g, &out, Some(&targets), &[0, 1], &plan, LossWeights::default(), off).unwrap();
        assert_eq!(g.value(total).item(), br.pred);
        assert_eq!((br.hidn, br.attn), (0.0, 0.0));

        let (_, full) = total_loss(&mut g, &out, Some(&targets), &[0, 1], &plan, LossWeights::default(), LossSwitches::default()).unwrap();
        assert!((full.total - (full.pred + full.hidn + full.attn)).abs() < 1e-12);
        assert!(full.hidn > 0.0 && full.attn > 0.0);
    }

    #[test]
    fn capture_required() {
        let student = micro(1);
        let (batch, masks) = fixture();
        let refs: Vec<&KnowledgeMask> = masks.iter().collect();
        let plan = PoolingPlan::new(&refs, batch.len).unwrap();
        let targets = PooledTargets::from_teacher(&student, &batch, &plan).unwrap();
        let mut g = Graph::new();
        let params = student.bind(&mut g);
        let out = student.forward(&mut g, &params, &batch, false, None).unwrap();
        assert!(matches!(
            layer_loss(&mut g, &out, &targets, &plan, 1, LossWeights::default()),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn weights_validated() {
        assert!(LossWeights::new(-0.1, 0.0).is_err());
        assert!(LossWeights::new(0.1, f64::NAN).is_err());
        assert_eq!(LossWeights::default(), LossWeights::new(0.6, 0.2).unwrap());
    }
}
