use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rgin_tensor::{Scalar, Tensor};

use crate::config::ModelConfig;

/// Named tensors in name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params<T> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Params<T> {
    pub fn new() -> Self {
        Params {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

/// Batch-norm parameter and running-statistic names under `prefix`.
pub fn bn_names(prefix: &str) -> [String; 4] {
    [
        format!("{prefix}.bn.gamma"),
        format!("{prefix}.bn.beta"),
        format!("{prefix}.bn.mean"),
        format!("{prefix}.bn.var"),
    ]
}

struct Init {
    rng: ChaCha8Rng,
    params: Params<f32>,
    buffers: Params<f32>,
}

impl Init {
    fn uniform(&mut self, name: String, shape: Vec<usize>, bound: f64) {
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound) as f32);
        self.params.insert(name, t);
    }

    /// He-style bound for layers followed by a leaky ReLU.
    fn he(&mut self, name: String, shape: Vec<usize>, fan_in: usize) {
        self.uniform(name, shape, (6.0 / fan_in as f64).sqrt());
    }

    fn xavier(&mut self, name: String, shape: Vec<usize>, fan_in: usize, fan_out: usize) {
        self.uniform(name, shape, (6.0 / (fan_in + fan_out) as f64).sqrt());
    }

    fn bn(&mut self, prefix: &str, c: usize) {
        let [g, b, m, v] = bn_names(prefix);
        self.params.insert(g, Tensor::ones(vec![c]));
        self.params.insert(b, Tensor::zeros(vec![c]));
        self.buffers.insert(m, Tensor::zeros(vec![c]));
        self.buffers.insert(v, Tensor::ones(vec![c]));
    }

    fn conv(&mut self, prefix: &str, k: usize, cin: usize, cout: usize) {
        self.he(format!("{prefix}.w"), vec![k, k, cin, cout], k * k * cin);
        self.bn(prefix, cout);
    }

    fn gru(&mut self, prefix: &str, e: usize, n: usize) {
        let bound = 1.0 / (n as f64).sqrt();
        self.uniform(format!("{prefix}.w"), vec![e, 3 * n], bound);
        self.uniform(format!("{prefix}.u_zr"), vec![n, 2 * n], bound);
        self.uniform(format!("{prefix}.u_h"), vec![n, n], bound);
        self.uniform(format!("{prefix}.b"), vec![1, 3 * n], bound);
    }
}

/// Initial trainable parameters and batch-norm buffers. Only components enabled
/// in `cfg` get parameters.
pub fn init_params(cfg: &ModelConfig, vocab_size: usize, seed: u64) -> (Params<f32>, Params<f32>) {
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(seed),
        params: Params::new(),
        buffers: Params::new(),
    };
    let (n, m, e) = (cfg.hidden, cfg.channels, cfg.embed_dim);
    init.uniform("text.embed".into(), vec![vocab_size, e], 0.08);
    init.gru("text.fwd", e, n);
    init.gru("text.bwd", e, n);

    let w = cfg.widths;
    init.conv("backbone.stem", 3, cfg.input_channels(), w[0]);
    init.conv("backbone.c1", 3, w[0], w[1]);
    init.conv("backbone.c2", 3, w[1], w[2]);
    init.conv("backbone.c3", 3, w[2], w[3]);

    if cfg.enable_afs {
        init.conv("proj.1", 3, w[1], m);
        init.conv("proj.2", 3, w[2], m);
    }
    init.conv("proj.3", 1, w[3], m);
    if cfg.enable_afs {
        init.uniform("afs.w".into(), vec![n, 3], 1.0 / (n as f64).sqrt());
        init.params.insert("afs.b", Tensor::zeros(vec![1, 3]));
    }

    if cfg.enable_garan {
        let c = m / cfg.heads;
        for j in 0..cfg.heads {
            for (kind, rows) in [("va", c), ("ta", n), ("vd", c), ("td", n)] {
                init.xavier(
                    format!("garan.h{j}.{kind}"),
                    vec![rows, cfg.att_dim],
                    rows,
                    cfg.att_dim,
                );
            }
        }
        init.he("garan.out.w".into(), vec![m, m], m);
        init.bn("garan.out", m);
    }

    init.he("fuse.wv".into(), vec![m, cfg.fusion_dim], m);
    init.he("fuse.wt".into(), vec![n, cfg.fusion_dim], n);
    let out = cfg.priors * 5;
    init.uniform(
        "head.w".into(),
        vec![cfg.fusion_dim, out],
        0.1 / (cfg.fusion_dim as f64).sqrt(),
    );
    // confidence logits start near a 1% prior so early steps are not spent
    // pushing every negative down
    let bias = Tensor::from_fn(vec![1, out], |i| if i % 5 == 4 { -4.6 } else { 0.0 });
    init.params.insert("head.b", bias);
    (init.params, init.buffers)
}
