//! Learnable prompts, per-layer adapters, cosine-similarity maps and their
//! multi-layer aggregation, each with the backward pass training needs.

use ndarray::{s, Array1, Array2, Axis};
use rayon::prelude::*;

use crate::encoders::{
    FeatureMap, FrozenEncoders, TextTrace, ANOMALY_CLASS_TOKENS, NORMAL_CLASS_TOKENS,
};
use crate::error::{Error, Result};
use crate::grid::{Grid, Resampler};
use crate::nn::scaled_normal;
use crate::rng::rng_from_seed;

pub const DEFAULT_PROMPT_TOKENS: usize = 8;
pub const DEFAULT_TEMPERATURE: f64 = 0.07;
/// Norm floor inside cosine similarity.
pub const NORM_FLOOR: f64 = 1e-12;
const PROMPT_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassPrompt {
    pub phrase: String,
    pub ids: Vec<usize>,
}

/// `M` shared learnable vectors `[V₁..V_M]` followed by a frozen class phrase.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBank {
    learnable: Array2<f64>,
    normal: Vec<ClassPrompt>,
    anomaly: Vec<ClassPrompt>,
}

impl PromptBank {
    /// Bank over the built-in class phrases (10 normal, 11 anomalous).
    pub fn new(encoders: &FrozenEncoders, tokens: usize, seed: u64) -> Result<Self> {
        Self::with_classes(
            encoders,
            tokens,
            seed,
            &NORMAL_CLASS_TOKENS,
            &ANOMALY_CLASS_TOKENS,
        )
    }

    pub fn with_classes(
        encoders: &FrozenEncoders,
        tokens: usize,
        seed: u64,
        normal: &[&str],
        anomaly: &[&str],
    ) -> Result<Self> {
        if tokens == 0 {
            return Err(Error::Config(
                "at least one learnable prompt token is required".into(),
            ));
        }
        if normal.is_empty() || anomaly.is_empty() {
            return Err(Error::Config(
                "both prompt sets need at least one class".into(),
            ));
        }
        let vocab = encoders.vocabulary();
        let build = |phrases: &[&str]| -> Result<Vec<ClassPrompt>> {
            phrases
                .iter()
                .map(|p| {
                    Ok(ClassPrompt {
                        phrase: p.to_string(),
                        ids: vocab.tokenize(p)?,
                    })
                })
                .collect()
        };
        let mut rng = rng_from_seed(seed);
        Ok(Self {
            learnable: scaled_normal(
                &mut rng,
                tokens,
                encoders.config().text_dim,
                PROMPT_INIT_STD,
            ),
            normal: build(normal)?,
            anomaly: build(anomaly)?,
        })
    }

    pub fn tokens(&self) -> usize {
        self.learnable.nrows()
    }

    pub fn learnable(&self) -> &Array2<f64> {
        &self.learnable
    }

    pub fn learnable_mut(&mut self) -> &mut Array2<f64> {
        &mut self.learnable
    }

    pub fn set_learnable(&mut self, v: Array2<f64>) -> Result<()> {
        if v.dim() != self.learnable.dim() {
            return Err(Error::Shape(format!(
                "prompt tensor {:?} vs expected {:?}",
                v.dim(),
                self.learnable.dim()
            )));
        }
        self.learnable = v;
        Ok(())
    }

    pub fn normal_classes(&self) -> &[ClassPrompt] {
        &self.normal
    }

    pub fn anomaly_classes(&self) -> &[ClassPrompt] {
        &self.anomaly
    }
}

fn sequence(
    bank: &PromptBank,
    encoders: &FrozenEncoders,
    class: &ClassPrompt,
) -> Result<Array2<f64>> {
    let m = bank.tokens();
    let len = m + class.ids.len();
    let max = encoders.config().context_length;
    if len + 1 > max {
        return Err(Error::Length { len: len + 1, max });
    }
    let mut seq = Array2::zeros((len, bank.learnable.ncols()));
    seq.slice_mut(s![..m, ..]).assign(&bank.learnable);
    seq.slice_mut(s![m.., ..])
        .assign(&encoders.embed_tokens(&class.ids));
    Ok(seq)
}

/// Embedding sequences `[V₁]..[V_M][CLS]` for the normal and anomaly sets.
pub fn build_prompt_sequences(
    bank: &PromptBank,
    encoders: &FrozenEncoders,
) -> Result<(Vec<Array2<f64>>, Vec<Array2<f64>>)> {
    let normal = bank
        .normal
        .iter()
        .map(|c| sequence(bank, encoders, c))
        .collect::<Result<_>>()?;
    let anomaly = bank
        .anomaly
        .iter()
        .map(|c| sequence(bank, encoders, c))
        .collect::<Result<_>>()?;
    Ok((normal, anomaly))
}

/// Mean prompt features `f_n`, `f_a` plus the traces for backpropagation.
pub struct TextFeatures {
    pub normal: Array1<f64>,
    pub anomaly: Array1<f64>,
    normal_traces: Vec<TextTrace>,
    anomaly_traces: Vec<TextTrace>,
}

fn encode_set(
    encoders: &FrozenEncoders,
    seqs: &[Array2<f64>],
) -> Result<(Array1<f64>, Vec<TextTrace>)> {
    let encoded: Vec<(Array1<f64>, TextTrace)> = seqs
        .par_iter()
        .map(|seq| encoders.encode_text_traced(seq))
        .collect::<Result<_>>()?;
    let mut mean = Array1::zeros(encoders.config().feature_dim);
    for (f, _) in &encoded {
        mean += f;
    }
    mean /= encoded.len() as f64;
    Ok((mean, encoded.into_iter().map(|(_, t)| t).collect()))
}

pub fn mean_text_features(bank: &PromptBank, encoders: &FrozenEncoders) -> Result<TextFeatures> {
    let (normal_seqs, anomaly_seqs) = build_prompt_sequences(bank, encoders)?;
    let (normal, normal_traces) = encode_set(encoders, &normal_seqs)?;
    let (anomaly, anomaly_traces) = encode_set(encoders, &anomaly_seqs)?;
    Ok(TextFeatures {
        normal,
        anomaly,
        normal_traces,
        anomaly_traces,
    })
}

impl TextFeatures {
    /// Gradient with respect to `[V]` given gradients on `f_n` and `f_a`.
    pub fn backward(
        &self,
        encoders: &FrozenEncoders,
        m: usize,
        d_normal: &Array1<f64>,
        d_anomaly: &Array1<f64>,
    ) -> Array2<f64> {
        let d_n = d_normal / self.normal_traces.len() as f64;
        let d_a = d_anomaly / self.anomaly_traces.len() as f64;
        let jobs: Vec<(&TextTrace, &Array1<f64>)> = self
            .normal_traces
            .iter()
            .map(|t| (t, &d_n))
            .chain(self.anomaly_traces.iter().map(|t| (t, &d_a)))
            .collect();
        let parts: Vec<Array2<f64>> = jobs
            .par_iter()
            .map(|(trace, d)| {
                encoders
                    .text_backward(trace, d)
                    .slice(s![..m, ..])
                    .to_owned()
            })
            .collect();
        let mut grad = Array2::zeros((m, encoders.config().text_dim));
        for p in &parts {
            grad += p;
        }
        grad
    }
}

/// Position-wise linear adapter `φ_j: R^{C_j} → R^C`.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Adapter {
    /// Scaled-normal weights (std `1/sqrt(C_j)`), zero bias.
    pub fn init(input: usize, output: usize, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        Self {
            weight: scaled_normal(&mut rng, output, input, 1.0 / (input as f64).sqrt()),
            bias: Array1::zeros(output),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            weight: Array2::eye(dim),
            bias: Array1::zeros(dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }
}

/// `g_j = φ_j(G_j)`.
pub fn adapt(features: &FeatureMap, adapter: &Adapter) -> Result<FeatureMap> {
    if features.channels() != adapter.input_dim() {
        return Err(Error::Shape(format!(
            "adapter expects {} channels, features have {}",
            adapter.input_dim(),
            features.channels()
        )));
    }
    Ok(FeatureMap {
        height: features.height,
        width: features.width,
        data: features.data.dot(&adapter.weight.t()) + &adapter.bias,
    })
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Per-layer normal/anomaly probability maps.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMaps {
    pub normal: Grid,
    pub anomaly: Grid,
}

/// Cosine similarity with the norm floor.
pub fn cosine(a: &ndarray::ArrayView1<f64>, b: &ndarray::ArrayView1<f64>) -> f64 {
    let na = a.dot(a).sqrt().max(NORM_FLOOR);
    let nb = b.dot(b).sqrt().max(NORM_FLOOR);
    a.dot(b) / (na * nb)
}

/// Two-way softmax of cosine similarities over `τ` at every position.
pub fn similarity_maps(
    g: &FeatureMap,
    f_n: &Array1<f64>,
    f_a: &Array1<f64>,
    tau: f64,
) -> Result<SimilarityMaps> {
    if !(tau > 0.0) {
        return Err(Error::InvalidInput(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    if g.channels() != f_n.len() || g.channels() != f_a.len() {
        return Err(Error::Shape(
            "feature width differs from text feature width".into(),
        ));
    }
    let mut normal = Grid::zeros(g.height, g.width);
    let mut anomaly = Grid::zeros(g.height, g.width);
    for (i, row) in g.data.rows().into_iter().enumerate() {
        let z = (cosine(&row, &f_a.view()) - cosine(&row, &f_n.view())) / tau;
        normal.as_mut_slice()[i] = sigmoid(-z);
        anomaly.as_mut_slice()[i] = sigmoid(z);
    }
    Ok(SimilarityMaps { normal, anomaly })
}

/// Gradients flowing out of one layer's similarity maps.
pub struct SimilarityGrad {
    pub d_features: Array2<f64>,
    pub d_normal: Array1<f64>,
    pub d_anomaly: Array1<f64>,
}

/// Backward pass of [`similarity_maps`] given gradients on both maps.
pub fn similarity_backward(
    g: &FeatureMap,
    f_n: &Array1<f64>,
    f_a: &Array1<f64>,
    tau: f64,
    maps: &SimilarityMaps,
    d_normal_map: &Grid,
    d_anomaly_map: &Grid,
) -> SimilarityGrad {
    let c = g.channels();
    let nfn = f_n.dot(f_n).sqrt();
    let nfa = f_a.dot(f_a).sqrt();
    let (nfn_f, nfa_f) = (nfn.max(NORM_FLOOR), nfa.max(NORM_FLOOR));
    let mut d_features = Array2::zeros(g.data.raw_dim());
    let mut d_fn = Array1::zeros(c);
    let mut d_fa = Array1::zeros(c);
    for (i, row) in g.data.rows().into_iter().enumerate() {
        let sa = maps.anomaly.as_slice()[i];
        let sn = maps.normal.as_slice()[i];
        let dz = (d_anomaly_map.as_slice()[i] - d_normal_map.as_slice()[i]) * sa * sn;
        if dz == 0.0 {
            continue;
        }
        let dcos_a = dz / tau;
        let dcos_n = -dz / tau;
        let ng_raw = row.dot(&row).sqrt();
        let ng = ng_raw.max(NORM_FLOOR);
        let cos_a = row.dot(f_a) / (ng * nfa_f);
        let cos_n = row.dot(f_n) / (ng * nfn_f);
        let mut dg = d_features.row_mut(i);
        // d cos(g, f) / dg = f / (|g||f|) - cos * g / |g|^2
        dg.scaled_add(dcos_a / (ng * nfa_f), f_a);
        dg.scaled_add(dcos_n / (ng * nfn_f), f_n);
        if ng_raw > NORM_FLOOR {
            dg.scaled_add(-(dcos_a * cos_a + dcos_n * cos_n) / (ng * ng), &row);
        }
        d_fa.scaled_add(dcos_a / (ng * nfa_f), &row);
        d_fn.scaled_add(dcos_n / (ng * nfn_f), &row);
        if nfa > NORM_FLOOR {
            d_fa.scaled_add(-dcos_a * cos_a / (nfa * nfa), f_a);
        }
        if nfn > NORM_FLOOR {
            d_fn.scaled_add(-dcos_n * cos_n / (nfn * nfn), f_n);
        }
    }
    SimilarityGrad {
        d_features,
        d_normal: d_fn,
        d_anomaly: d_fa,
    }
}

/// Upsamples every layer's maps to `height×width` (bilinear, pixel-centre
/// aligned) and averages across layers.
pub fn aggregate(layers: &[SimilarityMaps], height: usize, width: usize) -> Result<SimilarityMaps> {
    if layers.is_empty() {
        return Err(Error::InvalidInput(
            "aggregation needs at least one layer".into(),
        ));
    }
    let mut normal = Grid::zeros(height, width);
    let mut anomaly = Grid::zeros(height, width);
    for layer in layers {
        let rows = Resampler::new(layer.normal.height(), height);
        let cols = Resampler::new(layer.normal.width(), width);
        let up_n = rows.apply_2d(&cols, &layer.normal);
        let up_a = rows.apply_2d(&cols, &layer.anomaly);
        for (acc, v) in normal.as_mut_slice().iter_mut().zip(up_n.as_slice()) {
            *acc += v;
        }
        for (acc, v) in anomaly.as_mut_slice().iter_mut().zip(up_a.as_slice()) {
            *acc += v;
        }
    }
    let j = layers.len() as f64;
    Ok(SimilarityMaps {
        normal: normal.map(|v| v / j),
        anomaly: anomaly.map(|v| v / j),
    })
}

/// Adjoint of [`aggregate`] for one layer of size `layer_h×layer_w`.
pub fn aggregate_backward(d_map: &Grid, layer_h: usize, layer_w: usize, layers: usize) -> Grid {
    let rows = Resampler::new(layer_h, d_map.height());
    let cols = Resampler::new(layer_w, d_map.width());
    rows.adjoint_2d(&cols, d_map).map(|v| v / layers as f64)
}

/// Gradients of the adapter parameters from a gradient on its output.
pub fn adapter_backward(features: &FeatureMap, d_out: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    (d_out.t().dot(&features.data), d_out.sum_axis(Axis(0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderConfig;
    use crate::rng::rng_from_seed;
    use rand::Rng as _;

    fn encoders() -> FrozenEncoders {
        FrozenEncoders::init(&EncoderConfig::default(), 3).unwrap()
    }

    fn random_map(rng: &mut crate::rng::Rng, h: usize, w: usize, c: usize) -> FeatureMap {
        FeatureMap {
            height: h,
            width: w,
            data: Array2::from_shape_simple_fn((h * w, c), || rng.random_range(-1.0..1.0)),
        }
    }

    #[test]
    fn sequence_lengths_and_counts() {
        let enc = encoders();
        let bank = PromptBank::new(&enc, 8, 1).unwrap();
        let (n, a) = build_prompt_sequences(&bank, &enc).unwrap();
        assert_eq!((n.len(), a.len()), (10, 11));
        let healthy = bank
            .normal_classes()
            .iter()
            .position(|c| c.phrase == "healthy")
            .unwrap();
        assert_eq!(n[healthy].nrows(), 9);
        let long = bank
            .normal_classes()
            .iter()
            .position(|c| c.phrase == "no evidence of disease")
            .unwrap();
        assert_eq!(n[long].nrows(), 12);
        assert_eq!(n[long].slice(s![..8, ..]), bank.learnable());
    }

    #[test]
    fn overlong_prompt_is_length_error() {
        let enc = encoders();
        let bank = PromptBank::new(&enc, 12, 1).unwrap();
        assert!(matches!(
            build_prompt_sequences(&bank, &enc),
            Err(Error::Length { .. })
        ));
    }

    #[test]
    fn single_class_mean_is_that_feature() {
        let enc = encoders();
        let bank = PromptBank::with_classes(&enc, 8, 1, &["healthy"], &["lesion"]).unwrap();
        let feats = mean_text_features(&bank, &enc).unwrap();
        let (n, _) = build_prompt_sequences(&bank, &enc).unwrap();
        assert_eq!(feats.normal, enc.encode_text(&n[0]).unwrap());
    }

    #[test]
    fn mean_is_order_invariant() {
        let enc = encoders();
        let fwd =
            PromptBank::with_classes(&enc, 8, 1, &["healthy", "normal", "clear"], &["lesion"])
                .unwrap();
        let rev =
            PromptBank::with_classes(&enc, 8, 1, &["clear", "normal", "healthy"], &["lesion"])
                .unwrap();
        let a = mean_text_features(&fwd, &enc).unwrap().normal;
        let b = mean_text_features(&rev, &enc).unwrap().normal;
        assert!((&a - &b).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn prompt_gradient_matches_differences() {
        let enc = encoders();
        let mut bank = PromptBank::new(&enc, 8, 4).unwrap();
        let mut rng = rng_from_seed(9);
        let u = Array1::from_shape_simple_fn(64, || rng.random_range(-1.0..1.0));
        let zero = Array1::zeros(64);
        let feats = mean_text_features(&bank, &enc).unwrap();
        let grad = feats.backward(&enc, 8, &u, &zero);
        let h = 1e-5;
        for j in [0, 5, 17, 40, 63] {
            let base = bank.learnable()[[0, j]];
            bank.learnable_mut()[[0, j]] = base + h;
            let fp = mean_text_features(&bank, &enc).unwrap().normal.dot(&u);
            bank.learnable_mut()[[0, j]] = base - h;
            let fm = mean_text_features(&bank, &enc).unwrap().normal.dot(&u);
            bank.learnable_mut()[[0, j]] = base;
            let num = (fp - fm) / (2.0 * h);
            let a = grad[[0, j]];
            let err = (a - num).abs() / a.abs().max(num.abs()).max(1e-8);
            assert!(err < 1e-4, "coord {j}: {a} vs {num}");
        }
    }

    #[test]
    fn adapter_examples() {
        let mut rng = rng_from_seed(2);
        let g = random_map(&mut rng, 2, 2, 3);
        assert_eq!(adapt(&g, &Adapter::identity(3)).unwrap(), g);
        let zero = Adapter {
            weight: Array2::zeros((4, 3)),
            bias: Array1::from(vec![1.0, -2.0, 0.5, 3.0]),
        };
        let out = adapt(&g, &zero).unwrap();
        for row in out.data.rows() {
            assert_eq!(row, zero.bias);
        }
        let adapter = Adapter::init(3, 4, 7);
        let out = adapt(&g, &adapter).unwrap();
        for p in 0..4 {
            for o in 0..4 {
                let mut expected = adapter.bias[o];
                for i in 0..3 {
                    expected += adapter.weight[[o, i]] * g.data[[p, i]];
                }
                assert!((out.data[[p, o]] - expected).abs() < 1e-15);
            }
        }
        assert!(matches!(
            adapt(&g, &Adapter::identity(5)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn similarity_scalar_cases() {
        let g = FeatureMap {
            height: 1,
            width: 1,
            data: Array2::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap(),
        };
        let f_n = Array1::from(vec![0.8, 0.6]);
        let f_a = Array1::from(vec![0.2, (1.0f64 - 0.04).sqrt()]);
        let maps = similarity_maps(&g, &f_n, &f_a, 0.07).unwrap();
        let expected = 1.0 / (1.0 + (-0.6f64 / 0.07).exp());
        assert!((maps.normal.get(0, 0) - expected).abs() < 1e-12);
        let tie = similarity_maps(&g, &f_n, &f_n, 0.07).unwrap();
        assert_eq!(tie.normal.get(0, 0), 0.5);
        assert_eq!(tie.anomaly.get(0, 0), 0.5);
        assert!(similarity_maps(&g, &f_n, &f_a, 0.0).is_err());
    }

    #[test]
    fn zero_features_use_norm_floor() {
        let g = FeatureMap {
            height: 1,
            width: 2,
            data: Array2::zeros((2, 3)),
        };
        let f = Array1::from(vec![1.0, 2.0, 3.0]);
        let maps = similarity_maps(&g, &f, &(-&f), 0.07).unwrap();
        assert!(maps.normal.as_slice().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn aggregation_examples() {
        let mut rng = rng_from_seed(8);
        let layer = SimilarityMaps {
            normal: Grid::from_fn(8, 8, |_, _| rng.random_range(0.0..1.0)),
            anomaly: Grid::zeros(8, 8),
        };
        let same = aggregate(std::slice::from_ref(&layer), 8, 8).unwrap();
        assert_eq!(same.normal, layer.normal);
        let constants: Vec<SimilarityMaps> = [0.2, 0.4, 0.9]
            .iter()
            .map(|&v| SimilarityMaps {
                normal: Grid::filled(8, 8, 1.0 - v),
                anomaly: Grid::filled(8, 8, v),
            })
            .collect();
        let agg = aggregate(&constants, 64, 64).unwrap();
        assert!(agg
            .anomaly
            .as_slice()
            .iter()
            .all(|v| (v - 0.5).abs() < 1e-12));
        let single = aggregate(&constants[2..], 64, 64).unwrap();
        assert!(single
            .anomaly
            .as_slice()
            .iter()
            .all(|v| (v - 0.9).abs() < 1e-15));
        assert!(aggregate(&[], 64, 64).is_err());
    }

    #[test]
    fn similarity_backward_matches_differences() {
        let mut rng = rng_from_seed(12);
        let g = random_map(&mut rng, 2, 2, 5);
        let f_n = Array1::from_shape_simple_fn(5, || rng.random_range(-1.0..1.0));
        let f_a = Array1::from_shape_simple_fn(5, || rng.random_range(-1.0..1.0));
        let wn = Grid::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
        let wa = Grid::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
        let tau = 0.5;
        let objective = |g: &FeatureMap, f_n: &Array1<f64>, f_a: &Array1<f64>| {
            let m = similarity_maps(g, f_n, f_a, tau).unwrap();
            let dn: f64 = m
                .normal
                .as_slice()
                .iter()
                .zip(wn.as_slice())
                .map(|(a, b)| a * b)
                .sum();
            let da: f64 = m
                .anomaly
                .as_slice()
                .iter()
                .zip(wa.as_slice())
                .map(|(a, b)| a * b)
                .sum();
            dn + da
        };
        let maps = similarity_maps(&g, &f_n, &f_a, tau).unwrap();
        let grad = similarity_backward(&g, &f_n, &f_a, tau, &maps, &wn, &wa);
        let h = 1e-6;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
        for p in 0..4 {
            for c in 0..5 {
                let mut gp = g.clone();
                gp.data[[p, c]] += h;
                let mut gm = g.clone();
                gm.data[[p, c]] -= h;
                let num = (objective(&gp, &f_n, &f_a) - objective(&gm, &f_n, &f_a)) / (2.0 * h);
                assert!(rel(grad.d_features[[p, c]], num) < 1e-6);
            }
        }
        for c in 0..5 {
            let mut p = f_a.clone();
            p[c] += h;
            let mut m = f_a.clone();
            m[c] -= h;
            let num = (objective(&g, &f_n, &p) - objective(&g, &f_n, &m)) / (2.0 * h);
            assert!(rel(grad.d_anomaly[c], num) < 1e-6);
            let mut p = f_n.clone();
            p[c] += h;
            let mut m = f_n.clone();
            m[c] -= h;
            let num = (objective(&g, &p, &f_a) - objective(&g, &m, &f_a)) / (2.0 * h);
            assert!(rel(grad.d_normal[c], num) < 1e-6);
        }
    }
}
