mod common;

use std::collections::HashMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cnnjm::corpus::{
    build_vocabulary, compute_affiliation, extract_samples, AlignedSentencePair, AlignmentLinkSet,
    BOS_ID, EOS_ID, PAD_ID, RESERVED,
};
use cnnjm::encoder::{encode, pool_global, Arch, EncoderParams, Fusion, Guide};
use cnnjm::jointlm::{predict_log_probs, PredictionContext};
use cnnjm::tensor::Tensor;
use cnnjm::training::{grad_check_config, random_samples};
use cnnjm::Model;

fn words() -> impl Strategy<Value = Vec<Vec<String>>> {
    prop::collection::vec(prop::collection::vec("[a-f]{1,2}", 0..8), 1..12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn vocabulary_round_trips(sents in words(), limit in 1usize..40) {
        let total: usize = sents.iter().map(Vec::len).sum();
        prop_assume!(total > 0);
        let v = build_vocabulary(sents.iter(), limit).unwrap();
        prop_assert!(v.len() <= limit + 4);
        for (i, r) in RESERVED.iter().enumerate() {
            prop_assert_eq!(v.id(r), Some(i as u32));
        }
        for id in 0..v.len() as u32 {
            let tok = v.token(id).unwrap();
            prop_assert_eq!(v.id(tok), Some(id));
        }
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for w in sents.iter().flatten() {
            *freq.entry(w.as_str()).or_default() += 1;
        }
        // every kept word is at least as frequent as every dropped one
        let kept_min = v.tokens()[4..].iter().map(|t| freq[t.as_str()]).min().unwrap_or(usize::MAX);
        let dropped_max = freq.iter().filter(|(w, _)| v.id(w).is_none()).map(|(_, &c)| c).max().unwrap_or(0);
        prop_assert!(kept_min >= dropped_max);
        let json = serde_json::to_string(&v).unwrap();
        prop_assert_eq!(serde_json::from_str::<cnnjm::corpus::Vocabulary>(&json).unwrap(), v);
    }

    #[test]
    fn affiliation_matches_brute_force(
        m in 1usize..20,
        n in 1usize..20,
        raw in prop::collection::vec((0usize..20, 0usize..20), 0..25),
    ) {
        let links: Vec<(usize, usize)> = raw.into_iter().map(|(s, t)| (s % n, t % m)).collect();
        let set: AlignmentLinkSet = links.iter().copied().collect();
        for t in 0..m {
            let got = compute_affiliation(t, &set, m).ok();
            prop_assert_eq!(got, common::brute_affiliation(t, &links, m));
        }
    }

    #[test]
    fn extracted_samples_are_well_formed(
        src_len in 1usize..9,
        tgt_len in 1usize..9,
        raw in prop::collection::vec((0usize..9, 0usize..9), 1..12),
        emit_eos: bool,
    ) {
        let source: Vec<String> = (0..src_len).map(|i| format!("s{i}")).collect();
        let target: Vec<String> = (0..tgt_len).map(|i| format!("t{}", i % 3)).collect();
        let alignment: AlignmentLinkSet = raw.into_iter().map(|(s, t)| (s % src_len, t % tgt_len)).collect();
        let pair = AlignedSentencePair { source_tokens: source.clone(), target_tokens: target.clone(), alignment, heads: None };
        let sv = build_vocabulary([&source], 100).unwrap();
        let tv = build_vocabulary([&target], 100).unwrap();
        let (k, maxlen) = (3, 10);
        let samples = extract_samples(&pair, &sv, &tv, k, maxlen, emit_eos).unwrap();
        prop_assert_eq!(samples.len(), tgt_len + emit_eos as usize);
        let offset = maxlen - src_len;
        for (n, s) in samples.iter().enumerate() {
            prop_assert_eq!(s.source_ids.len(), maxlen);
            prop_assert!(s.source_ids[..offset].iter().all(|&x| x == PAD_ID));
            prop_assert!(!s.affiliated.is_empty());
            prop_assert!(s.affiliated.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(s.affiliated.iter().all(|&p| p >= offset && p < maxlen));
            prop_assert_eq!(s.history.len(), k);
            let bos = k.saturating_sub(n);
            prop_assert!(s.history[..bos].iter().all(|&h| h == BOS_ID));
            for j in bos..k {
                prop_assert_eq!(s.history[j], tv.id(&target[n + j - k]).unwrap());
            }
            let want = if n < tgt_len { tv.id(&target[n]).unwrap() } else { EOS_ID };
            prop_assert_eq!(s.target, want);
        }
    }

    #[test]
    fn predictor_is_normalised(seed in 0u64..1000) {
        let m = Model::init_with_scale(grad_check_config(Arch::Attention, Fusion::Gating), 20, 20, seed, 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for s in random_samples(&m.config.encoder, 20, 20, 3, &mut rng) {
            let (trace, _) = m.forward(&s).unwrap();
            let phi = cnnjm::encoder::SourceRepresentation { values: trace.phi.clone() };
            let lp = predict_log_probs(&PredictionContext { phi: &phi, history: &s.history }, &m.joint).unwrap();
            let total: f64 = lp.iter().map(|v| v.exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn generic_encoding_ignores_guides(seed in 0u64..1000) {
        let m = Model::init_with_scale(grad_check_config(Arch::Generic, Fusion::Gating), 20, 20, seed, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_samples(&m.config.encoder, 20, 20, 2, &mut rng);
        let enc = |aff: &[usize], hist: &[u32]| {
            encode(&s[0].source_ids, Guide { affiliated: Some(aff), head_positions: &[], history: Some(hist) },
                   &m.config.encoder, &m.encoder, &m.joint.tgt_embeddings).unwrap().0
        };
        prop_assert_eq!(enc(&s[0].affiliated, &s[0].history), enc(&s[1].affiliated, &s[1].history));
        prop_assert_eq!(enc(&[], &[]), enc(&[9], &[4, 5, 6]));
    }

    #[test]
    fn zero_attention_weights_reduce_to_generic(seed in 0u64..1000, fusion_gating: bool) {
        let fusion = if fusion_gating { Fusion::Gating } else { Fusion::Pooling };
        let mut att = Model::init_with_scale(grad_check_config(Arch::Attention, fusion), 20, 20, seed, 1.0).unwrap();
        let last = att.encoder.attn.len() - 1;
        att.encoder.attn[last].w.fill(0.0);
        att.encoder.attn[last].b.fill(0.0);
        // h = σ(0) = 0.5 everywhere; fold it into the conv1 bias
        let p = att.config.encoder.prefix_width();
        let maps = att.config.encoder.conv1_maps;
        let width = att.config.encoder.conv1_width() - p;
        let mut gen = Model::init(grad_check_config(Arch::Generic, fusion), 20, 20, 0).unwrap();
        let e: &EncoderParams = &att.encoder;
        let mut conv1_w = Tensor::zeros(&[maps, width]);
        let mut conv1_b = e.conv1_b.clone();
        for f in 0..maps {
            conv1_w.row_mut(f).copy_from_slice(&e.conv1_w.row(f)[p..]);
            conv1_b.data_mut()[f] += 0.5 * e.conv1_w.row(f)[..p].iter().sum::<f64>();
        }
        gen.encoder = EncoderParams { conv1_w, conv1_b, attn: Vec::new(), ..e.clone() };
        gen.joint = att.joint.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for s in random_samples(&att.config.encoder, 20, 20, 3, &mut rng) {
            let a = att.log_probs(&s).unwrap();
            let g = gen.log_probs(&s).unwrap();
            for (x, y) in a.iter().zip(&g) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn one_max_pooling_is_max(rows in 1usize..9, cols in 1usize..6, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer3 = Tensor::uniform(&[rows, cols], 1.0, &mut rng);
        let (pooled, sel) = pool_global(&layer3, 1).unwrap();
        for f in 0..cols {
            let col: Vec<f64> = (0..rows).map(|i| layer3.row(i)[f]).collect();
            let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(pooled[f], max);
            prop_assert_eq!(sel[f].len(), 1);
            prop_assert_eq!(col[sel[f][0]], max);
        }
    }
}
