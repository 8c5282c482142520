use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use visotts::model::{
    positional_encoding, upsample, ModelConfig, ModelInput, Stack, TextEmbedding, VisoTts,
    VisualEmbedding,
};
use visotts::synthcorpus::{SpeakerEmbedding, TableSpeakerEmbedder, VisualFeatureSequence};
use visotts::text::{PhonemeSequence, PhonemeVocabulary};
use visotts::Error;

fn rand_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f32> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

fn phonemes(rng: &mut ChaCha8Rng, n: usize) -> PhonemeSequence {
    let v = PhonemeVocabulary::standard();
    let content = v.content_ids();
    let ids = (0..n).map(|_| content[rng.random_range(0..content.len())]).collect();
    PhonemeSequence::new(ids, &v, String::new()).unwrap()
}

fn visual(rng: &mut ChaCha8Rng, t: usize) -> VisualFeatureSequence {
    VisualFeatureSequence::new(rand_mat(rng, t, 512)).unwrap()
}

fn speaker(id: &str) -> SpeakerEmbedding {
    TableSpeakerEmbedder::new(5, vec![id.to_string()]).embed(id).unwrap()
}

fn small() -> ModelConfig {
    ModelConfig {
        text_blocks: 2,
        visual_blocks: 2,
        decoder_blocks: 2,
        ..ModelConfig::with_width(16)
    }
}

fn max_abs_diff<F: ndarray::NdFloat>(a: &Array2<F>, b: &Array2<F>) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs().to_f64().unwrap())
        .fold(0.0, f64::max)
}

#[test]
fn composed_shapes() {
    let model = VisoTts::<f32>::new(ModelConfig::default(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mel, align) = model
        .infer(&phonemes(&mut rng, 11), &visual(&mut rng, 7), &speaker("a"))
        .unwrap();
    assert_eq!(mel.frames().dim(), (28, 80));
    assert_eq!(align.weights().dim(), (7, 11));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]
    #[test]
    fn mel_length_is_four_times_video(n in 1usize..=40, t in 1usize..=60, seed in any::<u64>()) {
        let model = VisoTts::<f32>::new(small(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mel, align) = model.infer(&phonemes(&mut rng, n), &visual(&mut rng, t), &speaker("a")).unwrap();
        prop_assert_eq!(mel.n_frames(), 4 * t);
        prop_assert_eq!(align.weights().dim(), (t, n));
    }
}

#[test]
fn inference_is_deterministic_and_dropout_is_not() {
    let model = VisoTts::<f32>::new(small(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let input = ModelInput::single(&phonemes(&mut rng, 5), &visual(&mut rng, 4), &speaker("a"));
    let a = model.forward(&input).unwrap();
    let b = model.forward(&input).unwrap();
    assert_eq!(a.mel, b.mel);
    assert_eq!(a.alignments, b.alignments);
    let d1 = model.predict(&input, Some(1)).unwrap();
    let d1b = model.predict(&input, Some(1)).unwrap();
    let d2 = model.predict(&input, Some(2)).unwrap();
    assert_eq!(d1.mel, d1b.mel);
    assert_ne!(d1.mel, d2.mel);
}

#[test]
fn batched_forward_matches_single_utterances() {
    let model = VisoTts::<f64>::new(small(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let items: Vec<_> = [(3, 2), (7, 5), (1, 1)]
        .iter()
        .map(|&(n, t)| (phonemes(&mut rng, n), visual(&mut rng, t)))
        .collect();
    let spk = [speaker("a"), speaker("b"), speaker("c")];
    let singles: Vec<_> = items
        .iter()
        .zip(&spk)
        .map(|((p, v), s)| model.forward(&ModelInput::single(p, v, s)).unwrap())
        .collect();

    let mut packed = ModelInput::<f64>::single(&items[0].0, &items[0].1, &spk[0]);
    let parts: Vec<ModelInput<f64>> = items
        .iter()
        .zip(&spk)
        .map(|((p, v), s)| ModelInput::single(p, v, s))
        .collect();
    packed.phonemes = parts.iter().flat_map(|p| p.phonemes.clone()).collect();
    packed.text = visotts::model::Segments::from_lengths(&[3, 7, 1]);
    packed.frames = visotts::model::Segments::from_lengths(&[2, 5, 1]);
    packed.visual = ndarray::concatenate(
        ndarray::Axis(0),
        &parts.iter().map(|p| p.visual.view()).collect::<Vec<_>>(),
    )
    .unwrap();
    packed.speakers = ndarray::concatenate(
        ndarray::Axis(0),
        &parts.iter().map(|p| p.speakers.view()).collect::<Vec<_>>(),
    )
    .unwrap();
    let batch = model.forward(&packed).unwrap();
    for (b, single) in singles.iter().enumerate() {
        assert!(max_abs_diff(&batch.mel(b).to_owned(), &single.mel) < 1e-12);
        assert!(max_abs_diff(batch.alignments[b].weights(), single.alignments[0].weights()) < 1e-12);
    }
}

#[test]
fn text_encoder_properties() {
    let model = VisoTts::<f32>::new(ModelConfig::default(), 5).unwrap();
    let v = PhonemeVocabulary::standard();
    let one = model.encode_text(&v.encode(&["K"]).unwrap()).unwrap();
    assert_eq!(one.0.dim(), (1, 64));

    let a = v.encode(&["K", "AE", "T", "S"]).unwrap();
    let b = v.encode(&["S", "T", "AE", "K"]).unwrap();
    let ea = model.encode_text(&a).unwrap();
    let eb = model.encode_text(&b).unwrap();
    // compare each phoneme's row across the two orders
    let mut worst: f64 = 0.0;
    for (i, j) in [(0, 3), (1, 2), (2, 1), (3, 0)] {
        let d = (&ea.0.row(i) - &eb.0.row(j)).mapv(|x| x.abs() as f64).sum();
        worst = worst.max(d);
    }
    assert!(worst > 1e-6);
    assert_eq!(model.encode_text(&a).unwrap(), ea);

    let bad = PhonemeSequence::new(vec![1, 2], &v, String::new()).unwrap();
    let narrow = VisoTts::<f32>::new(ModelConfig { vocab_size: 2, ..small() }, 1).unwrap();
    assert!(matches!(narrow.encode_text(&bad), Err(Error::UnknownPhonemeId(2))));
}

#[test]
fn visual_encoder_properties() {
    let model = VisoTts::<f32>::new(ModelConfig::default(), 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    assert_eq!(model.encode_visual(&visual(&mut rng, 7)).unwrap().0.dim(), (7, 64));
    let zeros = VisualFeatureSequence::new(Array2::zeros((5, 512))).unwrap();
    assert!(model.encode_visual(&zeros).unwrap().0.iter().all(|v| v.is_finite()));
    assert!(model.encode_visual_raw(&Array2::zeros((3, 511))).is_err());
    let long = Array2::zeros((1001, 512));
    assert!(matches!(
        model.encode_visual_raw(&long),
        Err(Error::TooLong { len: 1001, max_len: 1000 })
    ));
}

fn single_head(d: usize) -> VisoTts<f64> {
    VisoTts::new(
        ModelConfig {
            heads: 1,
            text_blocks: 1,
            visual_blocks: 1,
            decoder_blocks: 1,
            ..ModelConfig::with_width(d)
        },
        1,
    )
    .unwrap()
}

#[test]
fn attention_identity_projection_example() {
    let mut model = single_head(2);
    for n in ["cross.wq", "cross.wk", "cross.wv", "cross.wo"] {
        *model.params_mut().get_mut(n).unwrap() = Array2::eye(2);
    }
    let (ctx, align) = model
        .visual_text_attention(
            &VisualEmbedding(array![[1.0, 0.0]]),
            &TextEmbedding(array![[1.0, 0.0], [0.0, 1.0]]),
        )
        .unwrap();
    let l0 = 1.0 / 2f64.sqrt();
    let w0 = l0.exp() / (l0.exp() + 1.0);
    let w = align.weights();
    assert!((w[[0, 0]] - w0).abs() < 1e-12);
    assert!((w[[0, 1]] - (1.0 - w0)).abs() < 1e-12);
    assert!((ctx[[0, 0]] - w0).abs() < 1e-12);
    assert!((ctx[[0, 1]] - (1.0 - w0)).abs() < 1e-12);
}

#[test]
fn attention_singleton_and_uniform_cases() {
    let model = VisoTts::<f64>::new(small(), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let vis = VisualEmbedding(rand_mat(&mut rng, 5, 16).mapv(f64::from));
    let one = TextEmbedding(rand_mat(&mut rng, 1, 16).mapv(f64::from));
    let (ctx, align) = model.visual_text_attention(&vis, &one).unwrap();
    assert!(align.weights().iter().all(|&w| (w - 1.0).abs() < 1e-12));
    for r in 1..5 {
        assert!(max_abs_diff(&ctx.row(r).to_owned().insert_axis(ndarray::Axis(0)), &ctx.row(0).to_owned().insert_axis(ndarray::Axis(0))) < 1e-12);
    }

    let mut zq = model.clone();
    *zq.params_mut().get_mut("cross.wq").unwrap() = Array2::zeros((16, 16));
    let text = TextEmbedding(rand_mat(&mut rng, 4, 16).mapv(f64::from));
    let (ctx, align) = zq.visual_text_attention(&vis, &text).unwrap();
    assert!(align.weights().iter().all(|&w| (w - 0.25).abs() < 1e-12));
    let p = zq.params();
    let values = text.0.dot(p.get("cross.wv").unwrap()) + p.get("cross.bv").unwrap();
    let mean = values.mean_axis(ndarray::Axis(0)).unwrap().insert_axis(ndarray::Axis(0));
    let want = mean.dot(p.get("cross.wo").unwrap()) + p.get("cross.bo").unwrap();
    for r in 0..5 {
        assert!(max_abs_diff(&ctx.row(r).to_owned().insert_axis(ndarray::Axis(0)), &want) < 1e-12);
    }

    assert!(model
        .visual_text_attention(&vis, &TextEmbedding(Array2::zeros((2, 8))))
        .is_err());
}

#[test]
fn attention_rows_are_stochastic() {
    let model = VisoTts::<f32>::new(ModelConfig::default(), 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..200 {
        let t = rng.random_range(1..30);
        let n = rng.random_range(1..30);
        let scale = rng.random_range(0.1..20.0);
        let vis = VisualEmbedding(rand_mat(&mut rng, t, 64) * scale);
        let text = TextEmbedding(rand_mat(&mut rng, n, 64) * scale);
        let (_, a) = model.visual_text_attention(&vis, &text).unwrap();
        for row in a.weights().rows() {
            assert!((row.sum() - 1.0).abs() <= 1e-5);
            assert!(row.iter().all(|&w| w >= 0.0));
        }
    }
}

#[test]
fn head_weights_average_to_the_alignment() {
    let model = VisoTts::<f32>::new(ModelConfig::default(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let vis = VisualEmbedding(rand_mat(&mut rng, 9, 64) * 3.0);
    let text = TextEmbedding(rand_mat(&mut rng, 5, 64) * 3.0);
    let heads = model.attention_heads(&vis, &text).unwrap();
    let (_, mean) = model.visual_text_attention(&vis, &text).unwrap();
    assert_eq!(heads.len(), 2);
    let avg = (heads[0].weights() + heads[1].weights()) / 2.0;
    assert!(max_abs_diff(&avg, mean.weights()) < 1e-6);
    assert!(heads[0].weights().iter().zip(heads[1].weights()).any(|(a, b)| (a - b).abs() > 1e-3));
}

#[test]
fn attention_is_equivariant_to_text_permutation() {
    let model = VisoTts::<f32>::new(ModelConfig::default(), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..30 {
        let t = rng.random_range(1..20);
        let n = rng.random_range(1..20);
        let vis = VisualEmbedding(rand_mat(&mut rng, t, 64));
        let text = rand_mat(&mut rng, n, 64);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let permuted = text.select(ndarray::Axis(0), &perm);
        let (c1, a1) = model.visual_text_attention(&vis, &TextEmbedding(text)).unwrap();
        let (c2, a2) = model.visual_text_attention(&vis, &TextEmbedding(permuted)).unwrap();
        assert!(max_abs_diff(&c1, &c2) <= 1e-6);
        let moved = a1.weights().select(ndarray::Axis(1), &perm);
        assert!(max_abs_diff(&moved, a2.weights()) <= 1e-6);
    }
}

#[test]
fn fft_block_closed_form_with_zero_projections() {
    let cfg = ModelConfig {
        heads: 2,
        text_blocks: 1,
        visual_blocks: 1,
        decoder_blocks: 1,
        ..ModelConfig::with_width(4)
    };
    let mut model = VisoTts::<f64>::new(cfg, 1).unwrap();
    let names: Vec<String> = model.params().names().to_vec();
    for n in names.iter().filter(|n| n.starts_with("text.block0.") && !n.contains(".ln")) {
        model.params_mut().get_mut(n).unwrap().fill(0.0);
    }
    let x = array![[1.0, 2.0, 4.0, -1.0], [0.5, 0.5, 0.0, 3.0]];
    let out = model.fft_block(Stack::Text, 0, &x).unwrap();

    let ln = |v: &[f64]| -> Vec<f64> {
        let m = v.iter().sum::<f64>() / 4.0;
        let var = v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 4.0;
        v.iter().map(|a| (a - m) / (var + 1e-5).sqrt()).collect()
    };
    for r in 0..2 {
        let row: Vec<f64> = x.row(r).to_vec();
        let want = ln(&ln(&row));
        for c in 0..4 {
            assert!((out[[r, c]] - want[c]).abs() < 1e-12, "row {r} col {c}");
        }
    }
}

#[test]
fn fft_block_preserves_shape() {
    let model = VisoTts::<f32>::new(small(), 10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for l in [1, 7, 50] {
        let x = rand_mat(&mut rng, l, 16);
        for s in [Stack::Text, Stack::Visual, Stack::Decoder] {
            assert_eq!(model.fft_block(s, 1, &x).unwrap().dim(), (l, 16));
        }
    }
    assert!(model.fft_block(Stack::Text, 0, &rand_mat(&mut rng, 3, 8)).is_err());
}

#[test]
fn speaker_conditioning() {
    let model = VisoTts::<f32>::new(small(), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for t in [1, 9] {
        let ctx = rand_mat(&mut rng, 4 * t, 16);
        let zero = model.condition_speaker(&ctx, &[0.0; 256]).unwrap();
        assert_eq!(zero, ctx);
        let a = model.condition_speaker(&ctx, speaker("a").vector()).unwrap();
        let b = model.condition_speaker(&ctx, speaker("b").vector()).unwrap();
        assert_eq!(a.dim(), ctx.dim());
        let diff = &a - &b;
        for r in 1..diff.nrows() {
            for c in 0..16 {
                assert!((diff[[r, c]] - diff[[0, c]]).abs() < 1e-6);
            }
        }
        assert!(diff.iter().any(|v| v.abs() > 1e-4));
    }
    assert!(model.condition_speaker(&Array2::zeros((4, 16)), &[0.0; 10]).is_err());
}

#[test]
fn decoder_shape_and_determinism() {
    let model = VisoTts::<f32>::new(ModelConfig::default(), 12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = rand_mat(&mut rng, 28, 64);
    let a = model.decode_mel(&x).unwrap();
    assert_eq!(a.dim(), (28, 80));
    assert_eq!(a, model.decode_mel(&x).unwrap());
}

#[test]
fn swapping_speakers_changes_the_mel() {
    let model = VisoTts::<f32>::new(ModelConfig::default(), 13).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let p = phonemes(&mut rng, 6);
    let v = visual(&mut rng, 5);
    let (a, _) = model.infer(&p, &v, &speaker("a")).unwrap();
    let (b, _) = model.infer(&p, &v, &speaker("b")).unwrap();
    assert!(max_abs_diff(a.frames(), b.frames()) > 1e-6);
}

#[test]
fn upsample_and_positions() {
    let x = array![[1.0f32, 2.0], [3.0, 4.0]];
    let up = upsample(&x, 4);
    assert_eq!(up.dim(), (8, 2));
    assert_eq!(up.slice(ndarray::s![..;4, ..]), x);
    let pe = positional_encoding(2, 64, 1000).unwrap();
    assert!((pe[[1, 0]] - 0.84147).abs() < 1e-5);
}

#[test]
fn param_names_are_distinct_and_complete() {
    let model = VisoTts::<f32>::new(ModelConfig::default(), 1).unwrap();
    let names = model.params().names();
    let set: std::collections::HashSet<_> = names.iter().collect();
    assert_eq!(set.len(), names.len());
    assert!(names.iter().any(|n| n == "text.block3.attn.wq"));
    assert!(names.iter().any(|n| n == "decoder.block5.conv1.w"));
    assert!(!names.iter().any(|n| n.contains("block4") && n.starts_with("text")));
    assert_eq!(
        model.params().get("decoder.block0.conv1.w").unwrap().dim(),
        (9 * 64, 256)
    );
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let cfg = ModelConfig {
        heads: 2,
        dropout: 0.0,
        ..ModelConfig::with_width(16)
    };
    let mut model = VisoTts::<f64>::new(cfg, 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let input = ModelInput::<f64>::single(&phonemes(&mut rng, 3), &visual(&mut rng, 2), &speaker("a"));
    let targets = rand_mat(&mut rng, 8, 80).mapv(|v| f64::from(v.abs()));
    let (_, grads) = model.loss_and_grads(&input, &targets, None).unwrap();

    // one coordinate from every tensor, then random extras up to 300
    let n_tensors = model.params().len();
    let mut coords: Vec<(usize, usize)> = (0..n_tensors)
        .map(|t| (t, rng.random_range(0..model.params().tensors()[t].len())))
        .collect();
    while coords.len() < n_tensors.max(300) {
        let t = rng.random_range(0..n_tensors);
        coords.push((t, rng.random_range(0..model.params().tensors()[t].len())));
    }
    assert!(coords.len() >= 200);

    const H: f64 = 1e-6;
    const FLOOR: f64 = 1e-6;
    const TOL: f64 = 1e-3;
    let mut worst = (0.0, String::new());
    for &(t, i) in &coords {
        let orig = model.params().tensors()[t].as_slice().unwrap()[i];
        let at = |v: f64, m: &mut VisoTts<f64>| {
            m.params_mut().tensors_mut()[t].as_slice_mut().unwrap()[i] = v;
            m.loss(&input, &targets, None).unwrap()
        };
        let up = at(orig + H, &mut model);
        let down = at(orig - H, &mut model);
        at(orig, &mut model);
        let numeric = (up - down) / (2.0 * H);
        let analytic = grads[t].as_slice().unwrap()[i];
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
        if err > worst.0 {
            worst = (err, format!("{}[{i}] analytic {analytic:e} numeric {numeric:e}", model.params().name(t)));
        }
    }
    assert!(worst.0 < TOL, "worst relative error {} at {}", worst.0, worst.1);
}
