//! Modality projection, video-text alignment, cross-modal fusion and
//! per-clip saliency.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::nn::{
    clip_centers, feed_forward, sinusoidal_encoding, Attention, EncoderLayer, LayerNorm, Linear, Mlp,
};
use crate::numerics::{ParamStore, Session, Tensor, Var};

/// Video queries attend to text, then a feed-forward; both post-norm.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CrossBlock {
    pub attention: Attention,
    pub norm1: LayerNorm,
    pub ffn: Mlp,
    pub norm2: LayerNorm,
}

impl CrossBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
    ) -> Self {
        Self {
            attention: Attention::new(store, rng, &format!("{name}.attn"), dim, heads),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            ffn: feed_forward(store, rng, &format!("{name}.ffn"), dim, hidden),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
        }
    }

    pub fn forward(&self, s: &mut Session, video: Var, text: Var) -> Result<Var> {
        let ctx = self.attention.forward(s, video, text, text)?;
        let x = s.add(video, ctx)?;
        let x = self.norm1.forward(s, x)?;
        let f = self.ffn.forward(s, x)?;
        let x = s.add(x, f)?;
        self.norm2.forward(s, x)
    }
}

/// Graph handles produced by one encoder pass.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    /// Projected clips `L x D`.
    pub video: Var,
    /// Projected words `N x D`.
    pub text: Var,
    /// Fusion embedding `L x D`.
    pub fused: Var,
    /// Clip positional encodings `L x D`, if enabled.
    pub positional: Option<Var>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Encoder {
    pub video_proj: Mlp,
    pub text_proj: Mlp,
    pub cross: Vec<CrossBlock>,
    pub layers: Vec<EncoderLayer>,
    pub saliency: Linear,
    pub d_model: usize,
    pub use_positional: bool,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        Self {
            video_proj: Mlp::new(store, rng, "enc.video_proj", &[cfg.d_video, d, d]),
            text_proj: Mlp::new(store, rng, "enc.text_proj", &[cfg.d_text, d, d]),
            cross: (0..cfg.n_cross_blocks)
                .map(|i| CrossBlock::new(store, rng, &format!("enc.cross{i}"), d, cfg.n_heads, cfg.ffn_dim))
                .collect(),
            layers: (0..cfg.n_encoder_layers)
                .map(|i| EncoderLayer::new(store, rng, &format!("enc.self{i}"), d, cfg.n_heads, cfg.ffn_dim))
                .collect(),
            saliency: Linear::new(store, rng, "enc.saliency", d, 1),
            d_model: d,
            use_positional: cfg.use_positional,
        }
    }

    /// Maps clips and words into the shared `D`-dimensional space.
    pub fn project(&self, s: &mut Session, video: &Tensor, text: &Tensor) -> Result<(Var, Var)> {
        for (t, want, what) in [(video, self.video_proj.in_dim(), "video"), (text, self.text_proj.in_dim(), "text")] {
            if t.cols() != want {
                return Err(Error::Shape(format!("{what} features have width {}, model expects {want}", t.cols())));
            }
        }
        let v = s.constant(video.clone());
        let t = s.constant(text.clone());
        let v = self.video_proj.forward(s, v)?;
        let t = self.text_proj.forward(s, t)?;
        Ok((v, t))
    }

    /// Cross-attention blocks then self-attention layers over clips.
    pub fn fuse(&self, s: &mut Session, video: Var, text: Var, positional: Option<Var>) -> Result<Var> {
        let mut x = video;
        for block in &self.cross {
            x = block.forward(s, x, text)?;
        }
        for layer in &self.layers {
            x = layer.forward(s, x, positional)?;
        }
        Ok(x)
    }

    pub fn forward(&self, s: &mut Session, video: &Tensor, text: &Tensor) -> Result<EncoderOutput> {
        let (v, t) = self.project(s, video, text)?;
        let positional =
            self.use_positional.then(|| s.constant(sinusoidal_encoding(&clip_centers(video.rows()), self.d_model)));
        let fused = self.fuse(s, v, t, positional)?;
        Ok(EncoderOutput { video: v, text: t, fused, positional })
    }

    /// One score per clip, `L x 1`.
    pub fn saliency_scores(&self, s: &mut Session, fused: Var) -> Result<Var> {
        self.saliency.forward(s, fused)
    }
}

/// Contrastive loss of the mean sentence vector against clips: a softmax
/// over clip similarities whose mass should sit on the positive clips.
///
/// Returns `None` when there are no positives; callers count those.
pub fn alignment_loss(
    s: &mut Session,
    video: Var,
    text: Var,
    positives: &[usize],
    temperature: f64,
) -> Result<Option<Var>> {
    if positives.is_empty() {
        return Ok(None);
    }
    let d = s.value(video).cols() as f64;
    let sentence = s.mean_rows(text)?;
    let sims = s.matmul_bt(video, sentence)?;
    let sims = s.scale(sims, 1.0 / (temperature * d.sqrt()));
    let all = s.logsumexp(sims)?;
    let pos = s.gather(sims, positives)?;
    let pos = s.logsumexp(pos)?;
    Ok(Some(s.sub(all, pos)?))
}

/// Mean hinge `max(0, margin + s_n - s_p)` over every (positive, negative)
/// clip pair. Clips with target at least 0.5 count as positive. Zero when
/// either side is empty.
pub fn saliency_loss(s: &mut Session, scores: Var, targets: &[f64], margin: f64) -> Result<Var> {
    let n = s.value(scores).len();
    if targets.len() != n {
        return Err(Error::Shape(format!("saliency: {n} scores, {} targets", targets.len())));
    }
    let pos: Vec<usize> = (0..n).filter(|&i| targets[i] >= 0.5).collect();
    let neg: Vec<usize> = (0..n).filter(|&i| targets[i] < 0.5).collect();
    if pos.is_empty() || neg.is_empty() {
        return Ok(s.constant(Tensor::scalar(0.0)));
    }
    let (mut pi, mut ni) = (Vec::new(), Vec::new());
    for &p in &pos {
        for &q in &neg {
            pi.push(p);
            ni.push(q);
        }
    }
    let sp = s.gather(scores, &pi)?;
    let sn = s.gather(scores, &ni)?;
    let diff = s.sub(sn, sp)?;
    let diff = s.add_scalar(diff, margin);
    let hinge = s.relu(diff);
    s.mean(hinge)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::gradcheck::check_params;
    use crate::numerics::{AdamW, AdamWConfig, ParamGrads};
    use crate::testutil as o;

    fn cfg(d_in: usize, d: usize) -> ModelConfig {
        ModelConfig { d_video: d_in, d_text: d_in, d_model: d, ffn_dim: 2 * d, ..ModelConfig::default() }
    }

    fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn set_linear(store: &mut ParamStore, l: &Linear, w: o::M, b: Vec<f64>) {
        store.set(l.weight, Tensor::from_rows(&w).unwrap()).unwrap();
        store.set(l.bias, Tensor::row(b)).unwrap();
    }

    fn zero_all(store: &mut ParamStore) {
        for id in store.ids().collect::<Vec<_>>() {
            if !store.name(id).contains(".gamma") {
                let shape = store.get(id).shape().to_vec();
                store.set(id, Tensor::zeros(&shape)).unwrap();
            }
        }
    }

    #[test]
    fn projection_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &mut rng, &cfg(5, 8));
        let mut s = Session::inference(&store);
        let out = enc.forward(&mut s, &random(4, 5, &mut rng), &random(3, 5, &mut rng)).unwrap();
        assert_eq!(s.value(out.video).shape(), &[4, 8]);
        assert_eq!(s.value(out.text).shape(), &[3, 8]);
        assert_eq!(s.value(out.fused).shape(), &[4, 8]);
        let sal = enc.saliency_scores(&mut s, out.fused).unwrap();
        assert_eq!(s.value(sal).shape(), &[4, 1]);
    }

    #[test]
    fn projection_rejects_wrong_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &mut rng, &cfg(5, 8));
        let mut s = Session::inference(&store);
        let err = enc.project(&mut s, &random(4, 6, &mut rng), &random(3, 5, &mut rng)).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn zero_weight_projection_gives_bias_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &mut rng, &cfg(3, 4));
        zero_all(&mut store);
        let last = &enc.video_proj.layers[1];
        store.set(last.bias, Tensor::row(vec![0.1, -0.2, 0.3, 0.4])).unwrap();
        let mut s = Session::inference(&store);
        let (v, _) = enc.project(&mut s, &random(2, 3, &mut rng), &random(2, 3, &mut rng)).unwrap();
        assert_eq!(s.value(v).data(), &[0.1, -0.2, 0.3, 0.4, 0.1, -0.2, 0.3, 0.4]);
    }

    #[test]
    fn projection_matches_matrix_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &mut rng, &cfg(2, 2));
        let w1 = vec![vec![1.0, -1.0], vec![0.5, 2.0]];
        let w2 = vec![vec![0.3, 0.0], vec![-0.4, 1.0]];
        set_linear(&mut store, &enc.video_proj.layers[0], w1.clone(), vec![0.1, -0.5]);
        set_linear(&mut store, &enc.video_proj.layers[1], w2.clone(), vec![0.0, 0.2]);
        let x = vec![vec![1.0, 2.0], vec![-1.0, 0.5]];
        let want = o::add_bias(&o::matmul(&o::relu(&o::add_bias(&o::matmul(&x, &w1), &[0.1, -0.5])), &w2), &[0.0, 0.2]);
        let mut s = Session::inference(&store);
        let (v, _) =
            enc.project(&mut s, &Tensor::from_rows(&x).unwrap(), &Tensor::matrix(1, 2, vec![0.0; 2]).unwrap()).unwrap();
        o::assert_close(&want, s.value(v).data(), 1e-14);
    }

    fn alignment(sims: &[f64], positives: &[usize]) -> f64 {
        // a D=1 video column with a unit sentence gives the raw similarities
        let store = ParamStore::new();
        let mut s = Session::inference(&store);
        let v = s.constant(Tensor::column(sims.to_vec()));
        let t = s.constant(Tensor::scalar(1.0));
        let l = alignment_loss(&mut s, v, t, positives, 1.0).unwrap().unwrap();
        s.value(l).item()
    }

    #[test]
    fn uniform_similarities_give_log_ratio() {
        let l = alignment(&[0.7; 6], &[1, 2]);
        assert!((l - (6.0f64 / 2.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn single_positive_clip_has_zero_alignment_loss() {
        assert!(alignment(&[0.3], &[0]).abs() < 1e-15);
    }

    #[test]
    fn dominant_positive_drives_alignment_loss_to_zero() {
        let l = alignment(&[60.0, -60.0, -60.0], &[0]);
        assert!((0.0..1e-40).contains(&l), "{l}");
    }

    #[test]
    fn no_positives_yields_no_term() {
        let store = ParamStore::new();
        let mut s = Session::inference(&store);
        let v = s.constant(Tensor::column(vec![1.0, 2.0]));
        let t = s.constant(Tensor::scalar(1.0));
        assert!(alignment_loss(&mut s, v, t, &[], 1.0).unwrap().is_none());
    }

    fn saliency(scores: &[f64], targets: &[f64]) -> f64 {
        let store = ParamStore::new();
        let mut s = Session::inference(&store);
        let v = s.constant(Tensor::column(scores.to_vec()));
        let l = saliency_loss(&mut s, v, targets, 0.2).unwrap();
        s.value(l).item()
    }

    #[test]
    fn saliency_hinge_cases() {
        assert_eq!(saliency(&[1.0, 0.5, 0.2], &[1.0, 0.0, 0.0]), 0.0);
        assert!((saliency(&[0.4, 0.4], &[1.0, 0.0]) - 0.2).abs() < 1e-15);
        // pairs (p0,n1): 0.2+0.3-0.5=0, (p0,n2): 0.2+0.6-0.5=0.3, (p3,n1): 0.2+0.3-0.4=0.1, (p3,n2): 0.2+0.6-0.4=0.4
        let got = saliency(&[0.5, 0.3, 0.6, 0.4], &[1.0, 0.0, 0.0, 1.0]);
        assert!((got - 0.8 / 4.0).abs() < 1e-15, "{got}");
        assert_eq!(saliency(&[0.1, 0.2], &[1.0, 1.0]), 0.0);
    }

    #[test]
    fn identical_words_give_identical_context() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let block = CrossBlock::new(&mut store, &mut rng, "x", 4, 1, 8);
        let word = random(1, 4, &mut rng);
        let text = Tensor::from_rows(&vec![word.row_slice(0).to_vec(); 3]).unwrap();
        let video = random(5, 4, &mut rng);
        let mut s = Session::inference(&store);
        let (v, t) = (s.constant(video), s.constant(text));
        let ctx = block.attention.forward(&mut s, v, t, t).unwrap();
        let ctx = s.value(ctx).clone();
        for r in 1..5 {
            for (a, b) in ctx.row_slice(0).iter().zip(ctx.row_slice(r)) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn cross_block_matches_hand_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let block = CrossBlock::new(&mut store, &mut rng, "x", 2, 1, 3);
        zero_all(&mut store);
        let a = &block.attention;
        for l in [&a.query, &a.key, &a.value, &a.output] {
            set_linear(&mut store, l, o::identity(2), vec![0.0, 0.0]);
        }
        let video = vec![vec![1.0, 0.0], vec![0.0, 2.0]];
        let text = vec![vec![0.5, 1.0], vec![-1.0, 0.3]];
        let mut s = Session::inference(&store);
        let (v, t) = (s.constant(Tensor::from_rows(&video).unwrap()), s.constant(Tensor::from_rows(&text).unwrap()));
        let out = block.forward(&mut s, v, t).unwrap();
        let eps = LayerNorm::EPS;
        let h = o::layer_norm(&o::add(&video, &o::identity_attention(&video, &text, &text)), eps);
        let want = o::layer_norm(&h, eps);
        o::assert_close(&want, s.value(out).data(), 1e-12);
    }

    #[test]
    fn fuse_is_permutation_equivariant_without_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let c = ModelConfig { use_positional: false, ..cfg(3, 4) };
        let enc = Encoder::new(&mut store, &mut rng, &c);
        let video = random(5, 3, &mut rng);
        let text = random(2, 3, &mut rng);
        let perm = [3, 0, 4, 1, 2];
        let permuted =
            Tensor::from_rows(&perm.iter().map(|&i| video.row_slice(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let run = |v: &Tensor| {
            let mut s = Session::inference(&store);
            let out = enc.forward(&mut s, v, &text).unwrap();
            s.value(out.fused).clone()
        };
        let (a, b) = (run(&video), run(&permuted));
        for (k, &i) in perm.iter().enumerate() {
            for (x, y) in a.row_slice(i).iter().zip(b.row_slice(k)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn encoder_losses_pass_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let c = ModelConfig { n_cross_blocks: 1, n_encoder_layers: 1, ..cfg(3, 4) };
        let enc = Encoder::new(&mut store, &mut rng, &c);
        let video = random(5, 3, &mut rng);
        let text = random(2, 3, &mut rng);
        let targets = [0.0, 1.0, 1.0, 0.0, 0.0];
        let report = check_params(&store, 1e-4, 3, &mut rng, |s| {
            let out = enc.forward(s, &video, &text)?;
            let al = alignment_loss(s, out.video, out.text, &[1, 2], 1.0)?.unwrap();
            let sc = enc.saliency_scores(s, out.fused)?;
            let sl = saliency_loss(s, sc, &targets, 0.2)?;
            s.add(al, sl)
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }

    #[test]
    fn alignment_loss_falls_over_first_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &mut rng, &cfg(4, 8));
        // positives carry the sentence direction, negatives its opposite
        let dir = random(1, 4, &mut rng);
        let clip = |sign: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
            dir.data().iter().map(|d| sign * d + 0.05 * rng.gen_range(-1.0..1.0)).collect()
        };
        let rows: Vec<Vec<f64>> =
            (0..6).map(|i| clip(if (2..4).contains(&i) { 1.0 } else { -1.0 }, &mut rng)).collect();
        let video = Tensor::from_rows(&rows).unwrap();
        let text = Tensor::from_rows(&[clip(1.0, &mut rng), clip(1.0, &mut rng)]).unwrap();
        let mut opt = AdamW::new(AdamWConfig { lr: 1e-3, weight_decay: 0.0, ..AdamWConfig::default() }, &store);
        let mut last = f64::INFINITY;
        for _ in 0..20 {
            let mut s = Session::new(&store);
            let (v, t) = enc.project(&mut s, &video, &text).unwrap();
            let l = alignment_loss(&mut s, v, t, &[2, 3], 1.0).unwrap().unwrap();
            let value = s.value(l).item();
            assert!(value < last, "alignment loss rose: {last} -> {value}");
            last = value;
            let mut raw = s.backward(l).unwrap();
            let mut grads = ParamGrads::zeros_like(&store);
            s.collect_grads(&mut raw, &mut grads);
            drop(s);
            opt.step(&mut store, &grads).unwrap();
        }
    }
}
