use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::tensor::Tensor;
use super::{DTConfig, Real};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F> {
    pub ln1_g: Tensor<F>,
    pub ln1_b: Tensor<F>,
    pub w_q: Tensor<F>,
    pub b_q: Tensor<F>,
    pub w_k: Tensor<F>,
    pub b_k: Tensor<F>,
    pub w_v: Tensor<F>,
    pub b_v: Tensor<F>,
    pub w_o: Tensor<F>,
    pub b_o: Tensor<F>,
    pub ln2_g: Tensor<F>,
    pub ln2_b: Tensor<F>,
    pub w_fc: Tensor<F>,
    pub b_fc: Tensor<F>,
    pub w_proj: Tensor<F>,
    pub b_proj: Tensor<F>,
}

/// All learnable tensors. Weight matrices are stored `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DTParams<F> {
    pub cfg: DTConfig,
    pub w_return: Tensor<F>,
    pub b_return: Tensor<F>,
    pub w_state: Tensor<F>,
    pub b_state: Tensor<F>,
    /// `(n_actions + 1) x d_model`; the last row embeds the reserved id.
    pub action_table: Tensor<F>,
    pub time_table: Tensor<F>,
    pub layers: Vec<LayerParams<F>>,
    pub lnf_g: Tensor<F>,
    pub lnf_b: Tensor<F>,
    pub w_head: Tensor<F>,
    pub b_head: Tensor<F>,
}

impl<F: Real> LayerParams<F> {
    fn zeros(d: usize) -> Self {
        LayerParams {
            ln1_g: Tensor::zeros(&[d]),
            ln1_b: Tensor::zeros(&[d]),
            w_q: Tensor::zeros(&[d, d]),
            b_q: Tensor::zeros(&[d]),
            w_k: Tensor::zeros(&[d, d]),
            b_k: Tensor::zeros(&[d]),
            w_v: Tensor::zeros(&[d, d]),
            b_v: Tensor::zeros(&[d]),
            w_o: Tensor::zeros(&[d, d]),
            b_o: Tensor::zeros(&[d]),
            ln2_g: Tensor::zeros(&[d]),
            ln2_b: Tensor::zeros(&[d]),
            w_fc: Tensor::zeros(&[d, 4 * d]),
            b_fc: Tensor::zeros(&[4 * d]),
            w_proj: Tensor::zeros(&[4 * d, d]),
            b_proj: Tensor::zeros(&[d]),
        }
    }

    fn named(&self) -> [(&'static str, &Tensor<F>); 16] {
        [
            ("ln1_g", &self.ln1_g),
            ("ln1_b", &self.ln1_b),
            ("w_q", &self.w_q),
            ("b_q", &self.b_q),
            ("w_k", &self.w_k),
            ("b_k", &self.b_k),
            ("w_v", &self.w_v),
            ("b_v", &self.b_v),
            ("w_o", &self.w_o),
            ("b_o", &self.b_o),
            ("ln2_g", &self.ln2_g),
            ("ln2_b", &self.ln2_b),
            ("w_fc", &self.w_fc),
            ("b_fc", &self.b_fc),
            ("w_proj", &self.w_proj),
            ("b_proj", &self.b_proj),
        ]
    }

    fn named_mut(&mut self) -> [(&'static str, &mut Tensor<F>); 16] {
        [
            ("ln1_g", &mut self.ln1_g),
            ("ln1_b", &mut self.ln1_b),
            ("w_q", &mut self.w_q),
            ("b_q", &mut self.b_q),
            ("w_k", &mut self.w_k),
            ("b_k", &mut self.b_k),
            ("w_v", &mut self.w_v),
            ("b_v", &mut self.b_v),
            ("w_o", &mut self.w_o),
            ("b_o", &mut self.b_o),
            ("ln2_g", &mut self.ln2_g),
            ("ln2_b", &mut self.ln2_b),
            ("w_fc", &mut self.w_fc),
            ("b_fc", &mut self.b_fc),
            ("w_proj", &mut self.w_proj),
            ("b_proj", &mut self.b_proj),
        ]
    }
}

impl<F: Real> DTParams<F> {
    /// Parameters with every tensor zero; also the gradient accumulator shape.
    pub fn zeros(cfg: &DTConfig) -> Self {
        let d = cfg.d_model;
        DTParams {
            cfg: cfg.clone(),
            w_return: Tensor::zeros(&[1, d]),
            b_return: Tensor::zeros(&[d]),
            w_state: Tensor::zeros(&[cfg.d_state, d]),
            b_state: Tensor::zeros(&[d]),
            action_table: Tensor::zeros(&[cfg.n_actions + 1, d]),
            time_table: Tensor::zeros(&[cfg.max_timestep, d]),
            layers: (0..cfg.n_layers).map(|_| LayerParams::zeros(d)).collect(),
            lnf_g: Tensor::zeros(&[d]),
            lnf_b: Tensor::zeros(&[d]),
            w_head: Tensor::zeros(&[d, cfg.n_actions]),
            b_head: Tensor::zeros(&[cfg.n_actions]),
        }
    }

    /// Every tensor with a stable dotted name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out: Vec<(String, &Tensor<F>)> = vec![
            ("embed.w_return".into(), &self.w_return),
            ("embed.b_return".into(), &self.b_return),
            ("embed.w_state".into(), &self.w_state),
            ("embed.b_state".into(), &self.b_state),
            ("embed.action".into(), &self.action_table),
            ("embed.time".into(), &self.time_table),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(l.named().into_iter().map(|(n, t)| (format!("layer{i}.{n}"), t)));
        }
        out.push(("final.ln_g".into(), &self.lnf_g));
        out.push(("final.ln_b".into(), &self.lnf_b));
        out.push(("head.w".into(), &self.w_head));
        out.push(("head.b".into(), &self.b_head));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut out: Vec<(String, &mut Tensor<F>)> = vec![
            ("embed.w_return".into(), &mut self.w_return),
            ("embed.b_return".into(), &mut self.b_return),
            ("embed.w_state".into(), &mut self.w_state),
            ("embed.b_state".into(), &mut self.b_state),
            ("embed.action".into(), &mut self.action_table),
            ("embed.time".into(), &mut self.time_table),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.extend(l.named_mut().into_iter().map(|(n, t)| (format!("layer{i}.{n}"), t)));
        }
        out.push(("final.ln_g".into(), &mut self.lnf_g));
        out.push(("final.ln_b".into(), &mut self.lnf_b));
        out.push(("head.w".into(), &mut self.w_head));
        out.push(("head.b".into(), &mut self.b_head));
        out
    }

    /// Which tensors receive weight decay, in `tensors()` order.
    pub fn decay_mask(&self) -> Vec<bool> {
        self.tensors().into_iter().map(|(n, t)| is_weight(&n, t)).collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn add_assign(&mut self, other: &DTParams<F>) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: F) {
        for (_, t) in self.tensors_mut() {
            t.scale(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors().iter().map(|(_, t)| t.sum_squares()).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.data.iter().all(|x| x.is_finite()))
    }

    pub fn cast<G: Real>(&self) -> DTParams<G> {
        let mut out = DTParams::<G>::zeros(&self.cfg);
        for ((_, dst), (_, src)) in out.tensors_mut().into_iter().zip(self.tensors()) {
            *dst = src.cast();
        }
        out
    }
}

/// Rank-2 tensors are weights; `_g` vectors are normalization gains.
pub(crate) fn is_weight(name: &str, t: &Tensor<impl Real>) -> bool {
    t.shape.len() == 2 && !name.ends_with("_g")
}

/// Truncated-normal weights (std 0.02, cut at two standard deviations), zero
/// biases, unit normalization gains.
pub fn init_params<F: Real>(cfg: &DTConfig, seed: u64) -> DTParams<F> {
    let mut p = DTParams::zeros(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = F::of(2.0 * INIT_STD);
    for (name, t) in p.tensors_mut() {
        if is_weight(&name, t) {
            for x in t.data.iter_mut() {
                *x = loop {
                    let z: f64 = rng.sample(StandardNormal);
                    let v = F::of(z * INIT_STD);
                    if v.abs() < bound {
                        break v;
                    }
                };
            }
        } else if name.ends_with("_g") {
            t.data.iter_mut().for_each(|x| *x = F::one());
        }
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> DTConfig {
        DTConfig { d_model: 8, n_layers: 2, context_k: 3, d_state: 4, max_timestep: 16, ..Default::default() }
    }

    #[test]
    fn init_is_seeded() {
        let a: DTParams<f32> = init_params(&cfg(), 5);
        let b: DTParams<f32> = init_params(&cfg(), 5);
        let c: DTParams<f32> = init_params(&cfg(), 6);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn init_ranges() {
        let p: DTParams<f32> = init_params(&cfg(), 1);
        for (name, t) in p.tensors() {
            if is_weight(&name, t) {
                assert!(t.data.iter().all(|x| x.abs() < 0.04), "{name}");
            } else if name.ends_with("_g") {
                assert!(t.data.iter().all(|&x| x == 1.0), "{name}");
            } else {
                assert!(t.data.iter().all(|&x| x == 0.0), "{name} should be zero");
            }
        }
    }

    #[test]
    fn names_are_unique() {
        let p: DTParams<f64> = DTParams::zeros(&cfg());
        let mut names: Vec<String> = p.tensors().into_iter().map(|(n, _)| n).collect();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
        assert_eq!(n, 6 + 16 * 2 + 4);
    }
}
