use super::{gradients, Batch, EncoderParams, Loss};
use crate::error::{Error, Result};

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: EncoderParams,
    v: EncoderParams,
}

impl Adam {
    pub fn new(params: &EncoderParams) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn apply(&mut self, params: &mut EncoderParams, grads: &EncoderParams, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let moments = self.m.tensors_mut().into_iter().zip(self.v.tensors_mut());
        for (((_, p), (_, g)), ((_, m), (_, v))) in params.tensors_mut().into_iter().zip(grads.tensors()).zip(moments) {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
    }
}

/// One optimizer step on `batch`. A non-finite gradient aborts the step and
/// leaves both the parameters and the optimizer untouched.
pub fn train_step(
    batch: &Batch,
    params: &mut EncoderParams,
    optimizer: &mut Adam,
    lr: f64,
    dropout_seed: Option<u64>,
) -> Result<Loss> {
    let (loss, grads) = gradients(batch, params, dropout_seed)?;
    if !loss.value.is_finite() || !grads.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite gradient at optimizer step {}",
            optimizer.step + 1
        )));
    }
    optimizer.apply(params, &grads, lr);
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constrained::{InjectedSequence, VisibleMatrix};
    use crate::encoder::EncoderConfig;

    fn toy() -> (EncoderParams, Vec<InjectedSequence>) {
        let cfg = EncoderConfig {
            vocab_size: 12,
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ff: 16,
            max_position: 8,
            dropout_rate: 0.0,
            use_segments: true,
            seed: 1,
        };
        let seqs = (0..4)
            .map(|i| InjectedSequence {
                tokens: vec![0, 6 + i, 1],
                soft_positions: vec![0, 1, 2],
                visible: VisibleMatrix::ones(3),
                segments: vec![0, 0, 0],
                trunk_mask: vec![true; 3],
                label: Some((i % 2) as u8),
            })
            .collect();
        (EncoderParams::init(&cfg).unwrap(), seqs)
    }

    #[test]
    fn zero_lr_keeps_params() {
        let (mut p, seqs) = toy();
        let before = p.clone();
        let refs: Vec<&InjectedSequence> = seqs.iter().collect();
        let batch = Batch::from_sequences(&refs).unwrap();
        let mut opt = Adam::new(&p);
        train_step(&batch, &mut p, &mut opt, 0.0, None).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn identical_steps_identical_params() {
        let (p0, seqs) = toy();
        let refs: Vec<&InjectedSequence> = seqs.iter().collect();
        let batch = Batch::from_sequences(&refs).unwrap();
        let run = || {
            let mut p = p0.clone();
            let mut opt = Adam::new(&p);
            train_step(&batch, &mut p, &mut opt, 1e-2, Some(5)).unwrap();
            p
        };
        assert_eq!(run(), run());
        assert_ne!(run(), p0);
    }

    #[test]
    fn nan_aborts_step() {
        let (mut p, seqs) = toy();
        p.layers[0].w1[[0, 0]] = f64::NAN;
        let before = p.clone();
        let refs: Vec<&InjectedSequence> = seqs.iter().collect();
        let batch = Batch::from_sequences(&refs).unwrap();
        let mut opt = Adam::new(&p);
        let err = train_step(&batch, &mut p, &mut opt, 1e-2, None);
        assert!(matches!(err, Err(Error::Numerical(_))));
        assert_eq!(opt.step, 0);
        // NaN != NaN, so compare bit patterns
        let bits = |q: &EncoderParams| -> Vec<u64> {
            q.tensors().iter().flat_map(|(_, t)| t.iter().map(|x| x.to_bits())).collect()
        };
        assert_eq!(bits(&p), bits(&before));
    }
}
