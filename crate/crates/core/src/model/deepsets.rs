use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::instance::{PairedInstance, SetBatch};
use crate::error::{Error, Result};
use crate::numerics::{
    log_softmax2, Checkpoint, Matrix, ParamId, ParamStore, Pooling, Segments, Tape, Var,
};

pub const DECISION_THRESHOLD: f64 = 0.5;

/// How the query enters the network.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Every support element is concatenated with the query before the
    /// equivariant stack.
    Paired,
    /// The equivariant stack sees only the support set; the query is
    /// concatenated to the pooled representation before the head.
    LateConcat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub feature_dim: usize,
    pub width: usize,
    pub equivariant_layers: usize,
    pub head_layers: usize,
    pub pooling: Pooling,
    pub architecture: Architecture,
    pub seed: u64,
}

impl NetConfig {
    /// Splits `layers` hidden layers into `ceil(layers/2)` equivariant layers
    /// and the rest as dense head layers (5 → 3 + 2).
    pub fn new(feature_dim: usize, width: usize, layers: usize, seed: u64) -> Self {
        let equivariant_layers = layers.div_ceil(2).max(1);
        NetConfig {
            feature_dim,
            width,
            equivariant_layers,
            head_layers: layers.saturating_sub(equivariant_layers),
            pooling: Pooling::Mean,
            architecture: Architecture::Paired,
            seed,
        }
    }

    fn to_meta(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("feature_dim".into(), self.feature_dim.to_string());
        m.insert("width".into(), self.width.to_string());
        m.insert("equivariant_layers".into(), self.equivariant_layers.to_string());
        m.insert("head_layers".into(), self.head_layers.to_string());
        m.insert("pooling".into(), self.pooling.to_string());
        m.insert(
            "architecture".into(),
            match self.architecture {
                Architecture::Paired => "paired",
                Architecture::LateConcat => "late_concat",
            }
            .into(),
        );
        m.insert("seed".into(), self.seed.to_string());
        m
    }

    fn from_meta(meta: &BTreeMap<String, String>) -> Result<Self> {
        fn get<'a>(meta: &'a BTreeMap<String, String>, k: &str) -> Result<&'a str> {
            meta.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks `{k}`")))
        }
        fn num<T: std::str::FromStr>(meta: &BTreeMap<String, String>, k: &str) -> Result<T> {
            get(meta, k)?
                .parse()
                .map_err(|_| Error::Data(format!("checkpoint field `{k}` is not a number")))
        }
        Ok(NetConfig {
            feature_dim: num(meta, "feature_dim")?,
            width: num(meta, "width")?,
            equivariant_layers: num(meta, "equivariant_layers")?,
            head_layers: num(meta, "head_layers")?,
            pooling: get(meta, "pooling")?.parse()?,
            architecture: match get(meta, "architecture")? {
                "paired" => Architecture::Paired,
                "late_concat" => Architecture::LateConcat,
                other => return Err(Error::Data(format!("unknown architecture {other}"))),
            },
            seed: num(meta, "seed")?,
        })
    }
}

/// Softmax output for one instance.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct Prediction {
    pub positive: f64,
    pub negative: f64,
}

impl Prediction {
    pub fn from_logits(z_neg: f64, z_pos: f64) -> Self {
        let (lp0, lp1) = log_softmax2(z_neg, z_pos);
        Prediction {
            positive: lp1.exp(),
            negative: lp0.exp(),
        }
    }

    pub fn label(&self) -> bool {
        self.positive > DECISION_THRESHOLD
    }
}

#[derive(Clone, Debug)]
struct EquivariantLayer {
    element: ParamId,
    pooled: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct Dense {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct DeepSetsNet {
    config: NetConfig,
    params: ParamStore,
    equivariant: Vec<EquivariantLayer>,
    head: Vec<Dense>,
    output: Dense,
}

fn he_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Matrix {
    let bound = (6.0 / fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Matrix::from_vec(fan_in, fan_out, data).expect("shape")
}

impl DeepSetsNet {
    pub fn build(config: NetConfig) -> Result<Self> {
        if config.feature_dim == 0 || config.width == 0 {
            return Err(Error::InvalidArgument(
                "feature dimension and width must be at least 1".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let w = config.width;
        let n = config.feature_dim;
        let mut input = match config.architecture {
            Architecture::Paired => 2 * n,
            Architecture::LateConcat => n,
        };
        let mut equivariant = Vec::new();
        for i in 0..config.equivariant_layers {
            let element = params.add(format!("eq{i}.element"), he_uniform(&mut rng, input, w))?;
            let pooled = params.add(format!("eq{i}.pooled"), he_uniform(&mut rng, input, w))?;
            let bias = params.add(format!("eq{i}.bias"), Matrix::zeros(1, w))?;
            equivariant.push(EquivariantLayer {
                element,
                pooled,
                bias,
            });
            input = w;
        }
        if config.architecture == Architecture::LateConcat {
            input += n;
        }
        let mut head = Vec::new();
        for i in 0..config.head_layers {
            let weight = params.add(format!("head{i}.weight"), he_uniform(&mut rng, input, w))?;
            let bias = params.add(format!("head{i}.bias"), Matrix::zeros(1, w))?;
            head.push(Dense { weight, bias });
            input = w;
        }
        let weight = params.add("out.weight", he_uniform(&mut rng, input, 2))?;
        let bias = params.add("out.bias", Matrix::zeros(1, 2))?;
        Ok(DeepSetsNet {
            config,
            params,
            equivariant,
            head,
            output: Dense { weight, bias },
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_hash(&self) -> String {
        self.params.content_hash()
    }

    /// Records the forward pass of `batch` on `tape` and returns the B×2 logits.
    pub fn logits(&self, tape: &mut Tape, batch: &SetBatch) -> Result<Var> {
        let n = self.config.feature_dim;
        if batch.feature_dim() != n {
            return Err(Error::dim(
                "forward",
                format!("pair width {} but network expects {}", 2 * batch.feature_dim(), 2 * n),
            ));
        }
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let segs: &Rc<Segments> = &batch.segs;
        let (set_rows, queries) = match self.config.architecture {
            Architecture::Paired => (batch.rows.clone(), None),
            Architecture::LateConcat => {
                let total = batch.rows.rows();
                let mut support = Matrix::zeros(total, n);
                for i in 0..total {
                    support.row_mut(i).copy_from_slice(&batch.rows.row(i)[..n]);
                }
                let mut q = Matrix::zeros(segs.len(), n);
                for s in 0..segs.len() {
                    let first = segs.range(s).start;
                    q.row_mut(s).copy_from_slice(&batch.rows.row(first)[n..]);
                }
                (support, Some(q))
            }
        };
        let mut h = tape.input(set_rows);
        for layer in &self.equivariant {
            let lam = tape.param(&self.params, layer.element);
            let gam = tape.param(&self.params, layer.pooled);
            let b = tape.param(&self.params, layer.bias);
            let elementwise = tape.matmul(h, lam)?;
            let pooled = tape.pool(h, segs, self.config.pooling)?;
            let interaction = tape.matmul(pooled, gam)?;
            let spread = tape.broadcast(interaction, segs)?;
            let pre = tape.add(elementwise, spread)?;
            let pre = tape.add_row(pre, b)?;
            h = tape.relu(pre);
        }
        let mut z = tape.pool(h, segs, self.config.pooling)?;
        if let Some(q) = queries {
            let qv = tape.input(q);
            z = tape.concat_cols(z, qv)?;
        }
        for layer in &self.head {
            z = self.dense(tape, z, layer)?;
            z = tape.relu(z);
        }
        self.dense(tape, z, &self.output)
    }

    fn dense(&self, tape: &mut Tape, x: Var, layer: &Dense) -> Result<Var> {
        let w = tape.param(&self.params, layer.weight);
        let b = tape.param(&self.params, layer.bias);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }

    pub fn predict_batch(&self, batch: &SetBatch) -> Result<Vec<Prediction>> {
        let mut tape = Tape::new();
        let z = self.logits(&mut tape, batch)?;
        let z = tape.value(z);
        Ok((0..z.rows())
            .map(|i| Prediction::from_logits(z.get(i, 0), z.get(i, 1)))
            .collect())
    }

    pub fn forward(&self, inst: &PairedInstance) -> Result<Prediction> {
        if inst.feature_dim() != self.config.feature_dim {
            return Err(Error::dim(
                "forward",
                format!(
                    "pair width {} but network expects {}",
                    inst.pairs().cols(),
                    2 * self.config.feature_dim
                ),
            ));
        }
        let batch = SetBatch::from_instances(std::slice::from_ref(inst))?;
        Ok(self.predict_batch(&batch)?[0])
    }

    /// Scores `query` against `support` on a network built with
    /// [`Architecture::LateConcat`].
    pub fn forward_ablation_late_concat(
        &self,
        support: &Matrix,
        query: &[f64],
    ) -> Result<Prediction> {
        if self.config.architecture != Architecture::LateConcat {
            return Err(Error::Unsupported(
                "late-concat forward on a network built without the ablation flag".into(),
            ));
        }
        self.forward(&PairedInstance::new(support, query, None, 0)?)
    }

    pub fn to_checkpoint(&self, config_hash: &str) -> Checkpoint {
        Checkpoint {
            config_hash: config_hash.to_string(),
            meta: self.config.to_meta(),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = NetConfig::from_meta(&ck.meta)?;
        let mut net = DeepSetsNet::build(config)?;
        for id in net.params.ids().collect::<Vec<_>>() {
            let name = net.params.name(id).to_string();
            let src = ck
                .params
                .id(&name)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks parameter {name}")))?;
            let value = ck.params.value(src);
            if value.shape() != net.params.value(id).shape() {
                return Err(Error::Data(format!("parameter {name} has the wrong shape")));
            }
            *net.params.value_mut(id) = value.clone();
        }
        if ck.params.len() != net.params.len() {
            return Err(Error::Data("checkpoint has unexpected extra parameters".into()));
        }
        Ok(net)
    }

    /// Human-readable summary of the architecture and provenance.
    pub fn model_card(&self, config_hash: &str) -> String {
        let c = &self.config;
        let mut s = String::new();
        let _ = writeln!(s, "model: deep sets one-class classifier");
        let _ = writeln!(s, "architecture: {:?}", c.architecture);
        let _ = writeln!(s, "feature_dim: {}", c.feature_dim);
        let _ = writeln!(s, "width: {}", c.width);
        let _ = writeln!(s, "equivariant_layers: {}", c.equivariant_layers);
        let _ = writeln!(s, "head_layers: {}", c.head_layers);
        let _ = writeln!(s, "pooling: {}", c.pooling);
        let _ = writeln!(s, "activation: relu");
        let _ = writeln!(s, "output: 2-way softmax, threshold {DECISION_THRESHOLD}");
        let _ = writeln!(s, "parameters: {}", self.params.num_scalars());
        let _ = writeln!(s, "init_seed: {}", c.seed);
        let _ = writeln!(s, "config_hash: {config_hash}");
        let _ = writeln!(s, "param_hash: {}", self.param_hash());
        s
    }
}
