//! Named parameter store. Every tensor the model owns lives here as a
//! `name -> (shape, data)` entry; forwards bind the whole set onto a fresh
//! tape per pass, optimizers walk entries by index, and checkpoints
//! serialize them by name.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::HiViTConfig;
use crate::scalar::Scalar;
use crate::tensor::{Tape, TensorId};

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Arc<Vec<T>>,
}

#[derive(Debug, Clone)]
pub struct ParamSet<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

enum Init {
    TruncNormal,
    Zeros,
    Ones,
}

/// FNV-1a over the seed and the parameter name, so each parameter draws from
/// its own stream and adding or removing parameters never shifts the values
/// of the others.
fn param_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(name.as_bytes()) {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn trunc_normal<T: Scalar>(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<T> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u1: f64 = rng.gen::<f64>().max(1e-12);
        let u2: f64 = rng.gen();
        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        if z.abs() <= 2.0 {
            out.push(T::from_f64(z * std));
        }
    }
    out
}

impl<T: Scalar> ParamSet<T> {
    /// Materialize all parameters for `cfg`. `with_decoder` adds the
    /// reconstruction decoder and the dense-baseline input mask token on top
    /// of the encoder + classifier head.
    pub fn build(cfg: &HiViTConfig, seed: u64, with_decoder: bool) -> Self {
        let mut set = ParamSet { entries: Vec::new(), index: HashMap::new() };
        let push = |set: &mut Self, name: String, shape: Vec<usize>, init: Init| {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::TruncNormal => {
                    let mut rng = ChaCha8Rng::seed_from_u64(param_seed(seed, &name));
                    trunc_normal(&mut rng, n, 0.02)
                }
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
            };
            let idx = set.entries.len();
            set.index.insert(name.clone(), idx);
            set.entries.push(ParamEntry { name, shape, data: Arc::new(data) });
        };
        let linear = |set: &mut Self, prefix: &str, d_in: usize, d_out: usize| {
            push(set, format!("{prefix}.w"), vec![d_in, d_out], Init::TruncNormal);
            push(set, format!("{prefix}.b"), vec![d_out], Init::Zeros);
        };
        let norm = |set: &mut Self, prefix: &str, d: usize| {
            push(set, format!("{prefix}.g"), vec![d], Init::Ones);
            push(set, format!("{prefix}.b"), vec![d], Init::Zeros);
        };
        let mlp = |set: &mut Self, prefix: &str, d: usize, ratio: usize| {
            linear(set, &format!("{prefix}.fc1"), d, d * ratio);
            linear(set, &format!("{prefix}.fc2"), d * ratio, d);
        };
        let attn = |set: &mut Self, prefix: &str, d: usize| {
            for part in ["q", "k", "v", "proj"] {
                linear(set, &format!("{prefix}.{part}"), d, d);
            }
        };

        let plen = 3 * cfg.inner_patch * cfg.inner_patch;
        linear(&mut set, "embed", plen, cfg.embed_dim());
        norm(&mut set, "patch_norm", cfg.embed_dim());

        if !cfg.direct_embed() {
            for (stage, label) in [(0usize, "s1"), (1, "s2")] {
                let d = cfg.dims[stage];
                for i in 0..cfg.depths[stage] {
                    let p = format!("{label}.{i}");
                    norm(&mut set, &format!("{p}.norm1"), d);
                    mlp(&mut set, &format!("{p}.mlp1"), d, cfg.mlp_ratio_replace);
                    norm(&mut set, &format!("{p}.norm2"), d);
                    mlp(&mut set, &format!("{p}.mlp2"), d, cfg.mlp_ratio_main);
                }
                linear(
                    &mut set,
                    &format!("merge{}", stage + 1),
                    4 * d,
                    cfg.dims[stage + 1],
                );
            }
        }

        let d3 = cfg.dims[2];
        for i in 0..cfg.depths[2] {
            let p = format!("s3.{i}");
            norm(&mut set, &format!("{p}.norm1"), d3);
            attn(&mut set, &format!("{p}.attn"), d3);
            if cfg.use_rpe {
                push(
                    &mut set,
                    format!("{p}.rpe"),
                    vec![cfg.rpe_table_rows(), cfg.heads],
                    Init::TruncNormal,
                );
            }
            norm(&mut set, &format!("{p}.norm2"), d3);
            mlp(&mut set, &format!("{p}.mlp"), d3, cfg.mlp_ratio_main);
        }
        norm(&mut set, "final_norm", d3);
        linear(&mut set, "head", d3, cfg.num_classes);

        if with_decoder {
            linear(&mut set, "dec.embed", d3, cfg.dec_dim);
            push(&mut set, "dec.mask_token".into(), vec![cfg.dec_dim], Init::TruncNormal);
            for i in 0..cfg.dec_depth {
                let p = format!("dec.{i}");
                norm(&mut set, &format!("{p}.norm1"), cfg.dec_dim);
                attn(&mut set, &format!("{p}.attn"), cfg.dec_dim);
                norm(&mut set, &format!("{p}.norm2"), cfg.dec_dim);
                mlp(&mut set, &format!("{p}.mlp"), cfg.dec_dim, cfg.mlp_ratio_main);
            }
            norm(&mut set, "dec.norm", cfg.dec_dim);
            linear(&mut set, "dec.head", cfg.dec_dim, cfg.unit_pixels());
            // Input-level mask token for the dense masked baseline.
            push(&mut set, "dense.mask_token".into(), vec![cfg.embed_dim()], Init::TruncNormal);
        }
        set
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entry(&self, i: usize) -> &ParamEntry<T> {
        &self.entries[i]
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn total_elems(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    /// Mutable view of one parameter's values. Copy-on-write: a tape still
    /// holding the old values keeps them, the set moves on.
    pub fn data_mut(&mut self, i: usize) -> &mut Vec<T> {
        Arc::make_mut(&mut self.entries[i].data)
    }

    /// Replace a parameter's values wholesale (checkpoint load).
    pub fn set_data(&mut self, name: &str, data: Vec<T>) -> Result<(), String> {
        let Some(&i) = self.index.get(name) else {
            return Err(format!("unknown parameter `{name}`"));
        };
        let want = self.entries[i].data.len();
        if data.len() != want {
            return Err(format!(
                "parameter `{name}` holds {want} values, got {}",
                data.len()
            ));
        }
        self.entries[i].data = Arc::new(data);
        Ok(())
    }

    /// Create one tape leaf per entry (in entry order) and return the handle
    /// map the forward functions address parameters through.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        let mut ids = Vec::with_capacity(self.entries.len());
        let mut index = HashMap::with_capacity(self.entries.len());
        for e in &self.entries {
            let id = tape
                .leaf_shared(&e.shape, Arc::clone(&e.data))
                .expect("parameter shapes are valid by construction");
            index.insert(e.name.clone(), id);
            ids.push(id);
        }
        Bound { ids, index }
    }

    /// Entry indices whose name starts with any of `prefixes`.
    pub fn indices_with_prefix(&self, prefixes: &[&str]) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| prefixes.iter().any(|p| e.name.starts_with(p)))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Tape handles for one bound parameter set.
pub struct Bound {
    ids: Vec<TensorId>,
    index: HashMap<String, TensorId>,
}

impl Bound {
    /// Handle for `name`. Panics on a name the builder never created; that is
    /// a structural bug, not an input error.
    pub fn id(&self, name: &str) -> TensorId {
        match self.index.get(name) {
            Some(&id) => id,
            None => panic!("no parameter named `{name}`"),
        }
    }

    pub fn ids(&self) -> &[TensorId] {
        &self.ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_per_name_deterministic_and_order_free() {
        let cfg = HiViTConfig::preset("toy").unwrap();
        let a: ParamSet<f32> = ParamSet::build(&cfg, 7, true);
        let b: ParamSet<f32> = ParamSet::build(&cfg, 7, false);
        // Same seed: shared names get identical values whether or not the
        // decoder exists.
        for e in b.entries() {
            let other = a.get(&e.name).unwrap();
            assert_eq!(e.data, other.data, "{}", e.name);
            assert_eq!(e.shape, other.shape);
        }
        let c: ParamSet<f32> = ParamSet::build(&cfg, 8, false);
        let w_b = &b.get("embed.w").unwrap().data;
        let w_c = &c.get("embed.w").unwrap().data;
        assert_ne!(w_b, w_c);
    }

    #[test]
    fn init_statistics_and_bounds() {
        let cfg = HiViTConfig::preset("toy").unwrap();
        let set: ParamSet<f64> = ParamSet::build(&cfg, 0, false);
        let w = &set.get("s3.0.attn.q.w").unwrap().data;
        assert!(w.iter().all(|v| v.abs() <= 0.04 + 1e-12));
        let mean: f64 = w.iter().sum::<f64>() / w.len() as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!(set.get("s3.0.norm1.g").unwrap().data.iter().all(|&v| v == 1.0));
        assert!(set.get("head.b").unwrap().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn prefix_filtering_selects_head() {
        let cfg = HiViTConfig::preset("toy").unwrap();
        let set: ParamSet<f32> = ParamSet::build(&cfg, 0, false);
        let idx = set.indices_with_prefix(&["head."]);
        assert_eq!(idx.len(), 2);
        for i in idx {
            assert!(set.entry(i).name.starts_with("head."));
        }
    }

    #[test]
    fn bind_creates_leaves_in_entry_order() {
        let cfg = HiViTConfig::preset("toy").unwrap();
        let set: ParamSet<f32> = ParamSet::build(&cfg, 0, false);
        let mut t: Tape<f32> = Tape::new();
        let bound = set.bind(&mut t);
        assert_eq!(bound.ids().len(), set.len());
        for (i, e) in set.entries().iter().enumerate() {
            assert_eq!(bound.id(&e.name), bound.ids()[i]);
            assert!(t.is_leaf(bound.ids()[i]));
        }
    }
}
