use super::BackboneConfig;
use crate::autodiff::{Array, Bound, Graph, ParamSet, Var};
use crate::error::{ensure, Result};
use crate::geometry::{fps, Point, PointCloud, SpatialIndex};
use crate::rng::{derive_seed, fnv1a, SplitMix64};

const LN_EPS: f64 = 1e-5;
const RADIUS_INIT: f64 = 0.2;

/// Proxy centers with their feature rows.
#[derive(Clone, Debug)]
pub struct FeatureTokens {
    pub centers: Vec<Point>,
    /// `n_c x C`
    pub feats: Var,
}

#[derive(Clone, Debug)]
pub struct CompletionOutput {
    /// `n_q x 3`
    pub coarse: Var,
    /// `n_q * r x 3`; rows `j*r .. (j+1)*r` form the patch of query `j`.
    pub fine: Var,
    /// Encoder output, before any fusion.
    pub tokens: FeatureTokens,
}

/// Attention probability maps recorded during a forward pass.
#[derive(Clone, Debug, Default)]
pub struct AttentionLog {
    pub maps: Vec<Var>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    /// Uniform in `+-1/sqrt(fan_in)`.
    FanIn(usize),
    Zeros,
    Ones,
    Const(f64),
}

/// One completion network. Parameters live in a [`ParamSet`] under `prefix.`.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub prefix: String,
}

impl Backbone {
    pub fn new(cfg: BackboneConfig, prefix: impl Into<String>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, prefix: prefix.into() })
    }

    fn name(&self, local: &str) -> String {
        format!("{}.{local}", self.prefix)
    }

    fn p(&self, b: &Bound, local: &str) -> Result<Var> {
        b.get(&self.name(local))
    }

    fn specs(&self) -> Vec<(String, Vec<usize>, Init)> {
        let c = self.cfg.c;
        let mut out = Vec::new();
        let lin = |out: &mut Vec<_>, name: &str, i: usize, o: usize| {
            out.push((format!("{name}.w"), vec![i, o], Init::FanIn(i)));
            out.push((format!("{name}.b"), vec![o], Init::Zeros));
        };
        let ln = |out: &mut Vec<(String, Vec<usize>, Init)>, name: &str| {
            out.push((format!("{name}.g"), vec![c], Init::Ones));
            out.push((format!("{name}.b"), vec![c], Init::Zeros));
        };
        let attn = |out: &mut Vec<(String, Vec<usize>, Init)>, name: &str| {
            for w in ["wq", "wk", "wv", "wo"] {
                out.push((format!("{name}.{w}"), vec![c, c], Init::FanIn(c)));
            }
            out.push((format!("{name}.bo"), vec![c], Init::Zeros));
        };
        lin(&mut out, "proxy.l1", 3, c);
        lin(&mut out, "proxy.l2", c, c);
        lin(&mut out, "pos.l1", 3, c);
        lin(&mut out, "pos.l2", c, c);
        for l in 0..self.cfg.enc_layers {
            ln(&mut out, &format!("enc{l}.ln1"));
            attn(&mut out, &format!("enc{l}.attn"));
            ln(&mut out, &format!("enc{l}.ln2"));
            lin(&mut out, &format!("enc{l}.ffn1"), c, 2 * c);
            lin(&mut out, &format!("enc{l}.ffn2"), 2 * c, c);
        }
        lin(&mut out, "query.coarse", 2 * c, 3 * self.cfg.n_q);
        lin(&mut out, "query.l1", 3, c);
        lin(&mut out, "query.l2", c, c);
        lin(&mut out, "query.global", 2 * c, c);
        for l in 0..self.cfg.dec_layers {
            ln(&mut out, &format!("dec{l}.ln1"));
            attn(&mut out, &format!("dec{l}.self"));
            ln(&mut out, &format!("dec{l}.ln2"));
            ln(&mut out, &format!("dec{l}.lnm"));
            attn(&mut out, &format!("dec{l}.cross"));
            ln(&mut out, &format!("dec{l}.ln3"));
            lin(&mut out, &format!("dec{l}.ffn1"), c, 2 * c);
            lin(&mut out, &format!("dec{l}.ffn2"), 2 * c, c);
        }
        lin(&mut out, "rebuild.l1", c, c);
        lin(&mut out, "rebuild.l2", c, 3 * self.cfg.r());
        out.push(("rebuild.radius".into(), vec![1], Init::Const(RADIUS_INIT)));
        out
    }

    /// Local names of the proxy and encoder parameters (the part an auxiliary encoder reuses).
    pub fn is_encoder_param(local: &str) -> bool {
        local.starts_with("proxy.") || local.starts_with("pos.") || local.starts_with("enc")
    }

    /// Fresh parameters. Tensor `name` draws from `derive_seed(seed, fnv1a(salt + "/" + name))`,
    /// so two networks with the same salt and shapes start identical whatever their prefix.
    pub fn init(&self, seed: u64, salt: &str) -> ParamSet {
        let mut set = ParamSet::new();
        for (local, shape, init) in self.specs() {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Const(v) => vec![v; n],
                Init::FanIn(fan) => {
                    let bound = 1.0 / (fan as f64).sqrt();
                    let mut rng = SplitMix64::new(derive_seed(seed, fnv1a(format!("{salt}/{local}").as_bytes())));
                    (0..n).map(|_| rng.uniform(-bound, bound)).collect()
                }
            };
            set.insert(self.name(&local), Array::new(shape, data).expect("spec shapes are consistent"));
        }
        set
    }

    /// Encoder-only parameters (`proxy.*`, `pos.*`, `enc*`).
    pub fn init_encoder(&self, seed: u64, salt: &str) -> ParamSet {
        let head = format!("{}.", self.prefix);
        self.init(seed, salt).iter().filter(|(k, _)| Self::is_encoder_param(&k[head.len()..])).map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    /// Names this network expects, with shapes.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.specs().into_iter().map(|(n, s, _)| (self.name(&n), s)).collect()
    }

    /// Checks that `set` holds every tensor with the right shape. With `encoder_only`
    /// the query, decoder and rebuild tensors are not required.
    pub fn check_params(&self, set: &ParamSet, encoder_only: bool) -> Result<()> {
        for (local, shape, _) in self.specs() {
            if encoder_only && !Self::is_encoder_param(&local) {
                continue;
            }
            let name = self.name(&local);
            let a = set.require(&name)?;
            ensure!(a.shape() == shape.as_slice(), "parameter `{name}` has shape {:?}, expected {:?}", a.shape(), shape);
        }
        Ok(())
    }

    /// Binds this network's tensors from `set` onto `g`.
    pub fn bind(&self, g: &mut Graph, set: &ParamSet, trainable: bool) -> Bound {
        let head = format!("{}.", self.prefix);
        set.bind(g, |k| k.starts_with(&head), |_| trainable)
    }

    // ---- layers ----

    fn linear(&self, g: &mut Graph, b: &Bound, name: &str, x: Var) -> Result<Var> {
        let w = self.p(b, &format!("{name}.w"))?;
        let bias = self.p(b, &format!("{name}.b"))?;
        let y = g.matmul(x, w)?;
        g.add(y, bias)
    }

    fn mlp(&self, g: &mut Graph, b: &Bound, name: &str, x: Var) -> Result<Var> {
        let h = self.linear(g, b, &format!("{name}.l1"), x)?;
        let h = g.gelu(h)?;
        self.linear(g, b, &format!("{name}.l2"), h)
    }

    fn ln(&self, g: &mut Graph, b: &Bound, name: &str, x: Var) -> Result<Var> {
        let gain = self.p(b, &format!("{name}.g"))?;
        let bias = self.p(b, &format!("{name}.b"))?;
        g.layernorm(x, gain, bias, LN_EPS)
    }

    fn ffn(&self, g: &mut Graph, b: &Bound, name: &str, x: Var) -> Result<Var> {
        let h = self.linear(g, b, &format!("{name}.ffn1"), x)?;
        let h = g.gelu(h)?;
        self.linear(g, b, &format!("{name}.ffn2"), h)
    }

    /// Multi-head attention of `xq` rows over `xkv` rows.
    fn attention(&self, g: &mut Graph, b: &Bound, name: &str, xq: Var, xkv: Var, log: &mut AttentionLog) -> Result<Var> {
        let wq = self.p(b, &format!("{name}.wq"))?;
        let wk = self.p(b, &format!("{name}.wk"))?;
        let wv = self.p(b, &format!("{name}.wv"))?;
        let q = g.matmul(xq, wq)?;
        let k = g.matmul(xkv, wk)?;
        let v = g.matmul(xkv, wv)?;
        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let s = g.matmul_nt(qh, kh)?;
            let s = g.scale(s, scale)?;
            let a = g.softmax(s, 1)?;
            log.maps.push(a);
            heads.push(g.matmul(a, vh)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        let wo = self.p(b, &format!("{name}.wo"))?;
        let bo = self.p(b, &format!("{name}.bo"))?;
        let o = g.matmul(cat, wo)?;
        g.add(o, bo)
    }

    // ---- pipeline ----

    /// FPS centers (start 0) with kNN groups, encoded by a shared MLP on relative
    /// offsets, max-pooled, plus a positional MLP of the center.
    pub fn extract_proxies(&self, g: &mut Graph, b: &Bound, cloud: &PointCloud) -> Result<FeatureTokens> {
        let (n_c, k) = (self.cfg.n_c, self.cfg.k);
        ensure!(cloud.len() >= n_c, "extract_proxies: cloud has {} points, need at least n_c={n_c}", cloud.len());
        ensure!(cloud.len() >= k, "extract_proxies: cloud has {} points, need at least k={k}", cloud.len());
        let idx = fps(cloud, n_c, 0)?;
        let pts = cloud.points();
        let tree = SpatialIndex::build(cloud);
        let centers: Vec<Point> = idx.iter().map(|&i| pts[i]).collect();
        let mut offsets = Vec::with_capacity(n_c * k);
        for c in &centers {
            for j in tree.knn(c, k)? {
                let p = pts[j];
                offsets.push([p[0] - c[0], p[1] - c[1], p[2] - c[2]]);
            }
        }
        let off = g.constant(Array::from_points(&offsets));
        let h = self.mlp(g, b, "proxy", off)?;
        let local = g.segment_max(h, k)?;
        let cv = g.constant(Array::from_points(&centers));
        let pos = self.mlp(g, b, "pos", cv)?;
        let feats = g.add(local, pos)?;
        Ok(FeatureTokens { centers, feats })
    }

    pub fn encode(&self, g: &mut Graph, b: &Bound, tokens: &FeatureTokens) -> Result<FeatureTokens> {
        self.encode_logged(g, b, tokens, &mut AttentionLog::default())
    }

    /// Pre-norm self-attention blocks with feed-forward width `2C`.
    pub fn encode_logged(&self, g: &mut Graph, b: &Bound, tokens: &FeatureTokens, log: &mut AttentionLog) -> Result<FeatureTokens> {
        let want = [self.cfg.n_c, self.cfg.c];
        ensure!(g.shape(tokens.feats) == want, "encode: tokens {:?}, expected {want:?}", g.shape(tokens.feats));
        ensure!(tokens.centers.len() == self.cfg.n_c, "encode: {} centers for {} tokens", tokens.centers.len(), self.cfg.n_c);
        let mut x = tokens.feats;
        for l in 0..self.cfg.enc_layers {
            let h = self.ln(g, b, &format!("enc{l}.ln1"), x)?;
            let a = self.attention(g, b, &format!("enc{l}.attn"), h, h, log)?;
            x = g.add(x, a)?;
            let h = self.ln(g, b, &format!("enc{l}.ln2"), x)?;
            let f = self.ffn(g, b, &format!("enc{l}"), h)?;
            x = g.add(x, f)?;
        }
        Ok(FeatureTokens { centers: tokens.centers.clone(), feats: x })
    }

    /// `extract_proxies` followed by `encode`.
    pub fn encode_cloud(&self, g: &mut Graph, b: &Bound, cloud: &PointCloud) -> Result<FeatureTokens> {
        let t = self.extract_proxies(g, b, cloud)?;
        self.encode(g, b, &t)
    }

    /// Returns `(coarse n_q x 3, query embeddings n_q x C)`.
    pub fn generate_queries(&self, g: &mut Graph, b: &Bound, tokens: &FeatureTokens) -> Result<(Var, Var)> {
        let (n_c, c, n_q) = (self.cfg.n_c, self.cfg.c, self.cfg.n_q);
        ensure!(g.shape(tokens.feats) == [n_c, c], "generate_queries: tokens {:?}", g.shape(tokens.feats));
        let mx = g.segment_max(tokens.feats, n_c)?;
        let mean = g.mean_axis(tokens.feats, 0)?;
        let global = g.concat_cols(&[mx, mean])?;
        let coarse = self.linear(g, b, "query.coarse", global)?;
        let coarse = g.reshape(coarse, &[n_q, 3])?;
        let emb = self.mlp(g, b, "query", coarse)?;
        let gp = self.linear(g, b, "query.global", global)?;
        let gp = g.reshape(gp, &[c])?;
        let queries = g.add(emb, gp)?;
        Ok((coarse, queries))
    }

    pub fn decode(&self, g: &mut Graph, b: &Bound, queries: Var, tokens: &FeatureTokens) -> Result<Var> {
        self.decode_logged(g, b, queries, tokens, &mut AttentionLog::default())
    }

    /// Pre-norm blocks of query self-attention, cross-attention to the tokens, feed-forward.
    pub fn decode_logged(&self, g: &mut Graph, b: &Bound, queries: Var, tokens: &FeatureTokens, log: &mut AttentionLog) -> Result<Var> {
        let (n_c, c, n_q) = (self.cfg.n_c, self.cfg.c, self.cfg.n_q);
        ensure!(g.shape(queries) == [n_q, c], "decode: queries {:?}, expected [{n_q}, {c}]", g.shape(queries));
        ensure!(g.shape(tokens.feats) == [n_c, c], "decode: tokens {:?}, expected [{n_c}, {c}]", g.shape(tokens.feats));
        let mut x = queries;
        for l in 0..self.cfg.dec_layers {
            let h = self.ln(g, b, &format!("dec{l}.ln1"), x)?;
            let a = self.attention(g, b, &format!("dec{l}.self"), h, h, log)?;
            x = g.add(x, a)?;
            let h = self.ln(g, b, &format!("dec{l}.ln2"), x)?;
            let m = self.ln(g, b, &format!("dec{l}.lnm"), tokens.feats)?;
            let a = self.attention(g, b, &format!("dec{l}.cross"), h, m, log)?;
            x = g.add(x, a)?;
            let h = self.ln(g, b, &format!("dec{l}.ln3"), x)?;
            let f = self.ffn(g, b, &format!("dec{l}"), h)?;
            x = g.add(x, f)?;
        }
        Ok(x)
    }

    /// Each query emits `r` offsets `radius * tanh(MLP(q))` around its coarse center.
    /// Returns the fine cloud `n_q * r x 3`.
    pub fn rebuild(&self, g: &mut Graph, b: &Bound, refined: Var, coarse: Var) -> Result<Var> {
        let (c, n_q, r) = (self.cfg.c, self.cfg.n_q, self.cfg.r());
        ensure!(g.shape(refined) == [n_q, c], "rebuild: features {:?}, expected [{n_q}, {c}]", g.shape(refined));
        ensure!(g.shape(coarse) == [n_q, 3], "rebuild: coarse {:?}, expected [{n_q}, 3]", g.shape(coarse));
        let off = self.mlp(g, b, "rebuild", refined)?;
        let off = g.tanh(off)?;
        let off = g.scale_by(off, self.p(b, "rebuild.radius")?)?;
        let off = g.reshape(off, &[n_q * r, 3])?;
        let rep: Vec<usize> = (0..n_q).flat_map(|j| std::iter::repeat_n(j, r)).collect();
        let centers = g.gather_rows(coarse, &rep)?;
        g.add(centers, off)
    }

    /// Query generation, decoding and rebuild from already encoded tokens.
    pub fn head(&self, g: &mut Graph, b: &Bound, tokens: &FeatureTokens) -> Result<(Var, Var)> {
        let (coarse, queries) = self.generate_queries(g, b, tokens)?;
        let refined = self.decode(g, b, queries, tokens)?;
        let fine = self.rebuild(g, b, refined, coarse)?;
        Ok((coarse, fine))
    }

    pub fn complete(&self, g: &mut Graph, b: &Bound, cloud: &PointCloud) -> Result<CompletionOutput> {
        ensure!(cloud.len() == self.cfg.n_in, "complete: input has {} points, network expects {}", cloud.len(), self.cfg.n_in);
        let tokens = self.encode_cloud(g, b, cloud)?;
        let (coarse, fine) = self.head(g, b, &tokens)?;
        Ok(CompletionOutput { coarse, fine, tokens })
    }

    /// Gradient-free forward pass returning the fine cloud.
    pub fn infer(&self, params: &ParamSet, cloud: &PointCloud) -> Result<PointCloud> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, params, false);
        let out = self.complete(&mut g, &b, cloud)?;
        PointCloud::from_array(g.value(out.fine))
    }

    /// Gradient-free encoder pass returning `(centers, n_c x C features)`.
    pub fn infer_tokens(&self, params: &ParamSet, cloud: &PointCloud) -> Result<(Vec<Point>, Array)> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, params, false);
        let t = self.encode_cloud(&mut g, &b, cloud)?;
        Ok((t.centers, g.value(t.feats).clone()))
    }
}
