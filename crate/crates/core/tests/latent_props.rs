use modeprior::latents::prior::{entropy, TabularPrior};
use modeprior::latents::{
    decode_bbox, decode_blob, encode_bbox, encode_blob, parse_sequence, ArPrior, BboxParams, BlobParams,
    BlobQuantizer, LatentContent, LatentScheme, LatentSequence, TokenId, Vocab, VocabSpec, EOS,
};
use proptest::prelude::*;

fn vocab() -> Vocab {
    Vocab::new(VocabSpec {
        modes: ["mode_0A", "mode_0B", "mode_1A", "mode_1B"].map(String::from).to_vec(),
        numeric: true,
        vokens: 8,
    })
    .unwrap()
}

fn bbox() -> impl Strategy<Value = BboxParams> {
    (0u32..=1000, 0u32..=1000, 0u32..=1000, 0u32..=1000)
        .prop_map(|(a, b, c, d)| BboxParams::new(a.min(c), b.min(d), a.max(c), b.max(d)).unwrap())
}

fn blob() -> impl Strategy<Value = BlobParams> {
    (0.0f64..1000.0, 0.0f64..1000.0, 1e-3f64..999.0, 1e-3f64..999.0, 0.0f64..180.0).prop_map(|(x, y, a, b, t)| {
        BlobParams {
            xc: x,
            yc: y,
            r_major: a.max(b),
            r_minor: a.min(b),
            theta_deg: t,
        }
    })
}

fn content() -> impl Strategy<Value = LatentContent> {
    let bins = (0u32..1000, 0u32..1000, 0u32..1000, 0u32..1000, 0u32..180)
        .prop_map(|(x, y, a, b, t)| [x, y, a.max(b), a.min(b), t]);
    prop_oneof![
        (0usize..4).prop_map(|mode| LatentContent::Text { mode }),
        prop::collection::vec(bbox(), 1..3).prop_map(LatentContent::Bbox),
        prop::collection::vec(bins, 1..3).prop_map(LatentContent::Blob),
        prop::collection::vec(0usize..8, 1..5).prop_map(LatentContent::Voken),
        (0usize..4, prop::collection::vec(bbox(), 1..3), prop::collection::vec(0usize..8, 1..5))
            .prop_map(|(mode, boxes, vokens)| LatentContent::Combined { mode, boxes, vokens }),
    ]
}

proptest! {
    #[test]
    fn bbox_tokens_round_trip(b in bbox()) {
        let v = vocab();
        let toks = encode_bbox(&b, &v).unwrap();
        let back = decode_bbox(&toks, &v).unwrap();
        prop_assert_eq!(back, b);
        prop_assert_eq!(encode_bbox(&back, &v).unwrap(), toks);
    }

    #[test]
    fn out_of_order_boxes_are_rejected(b in bbox()) {
        prop_assume!(b.x1 < b.x2);
        let v = vocab();
        let swapped = BboxParams { x1: b.x2, y1: b.y1, x2: b.x1, y2: b.y2 };
        prop_assert!(encode_bbox(&swapped, &v).is_err());
        let toks = box_tokens(&[b.x2, b.y1, b.x1, b.y2], &v);
        prop_assert!(decode_bbox(&toks, &v).is_err());
    }

    #[test]
    fn blob_quantization_is_idempotent(p in blob()) {
        let v = vocab();
        let q = BlobQuantizer::default();
        let toks = encode_blob(&p, &q, &v).unwrap();
        let back = decode_blob(&toks, &q, &v).unwrap();
        prop_assert_eq!(back, q.quantize(&p).unwrap());
        prop_assert_eq!(encode_blob(&back, &q, &v).unwrap(), toks);
        let half = q.half_bin();
        let (pv, bv) = ([p.xc, p.yc, p.r_major, p.r_minor, p.theta_deg], [back.xc, back.yc, back.r_major, back.r_minor, back.theta_deg]);
        for i in [0, 1, 2, 4] {
            prop_assert!((pv[i] - bv[i]).abs() <= half[i] + 1e-9);
        }
    }

    #[test]
    fn every_scheme_round_trips(c in content()) {
        let v = vocab();
        let seq = c.encode(&v).unwrap();
        prop_assert_eq!(*seq.tokens.last().unwrap(), EOS);
        let parsed = parse_sequence(&seq, &v).unwrap();
        prop_assert_eq!(&parsed, &c);
        prop_assert_eq!(parsed.encode(&v).unwrap(), seq);
    }

    #[test]
    fn truncated_sequences_do_not_parse(c in content(), cut in 1usize..40) {
        let v = vocab();
        let seq = c.encode(&v).unwrap();
        prop_assume!(cut < seq.tokens.len());
        let short = LatentSequence::new(seq.scheme, seq.tokens[..seq.tokens.len() - cut].to_vec());
        prop_assert!(parse_sequence(&short, &v).is_err());
    }

    #[test]
    fn tabular_distributions_normalize(corpus in prop::collection::vec((0usize..2, prop::collection::vec(3u32..8, 0..5)), 0..30), window in 1usize..4, smoothing in 0.01f64..2.0) {
        let mut p = TabularPrior::new(8, window, smoothing).unwrap();
        for (c, toks) in &corpus {
            let mut t: Vec<TokenId> = toks.clone();
            t.push(EOS);
            p.observe(*c, &LatentSequence::new(LatentScheme::Voken, t)).unwrap();
        }
        let mut histories: Vec<(usize, Vec<TokenId>)> = p.contexts();
        histories.push((1, vec![5, 5, 5]));
        for (c, h) in histories {
            let q = p.next_probs(c, &h);
            prop_assert_eq!(q.len(), 7);
            prop_assert!(q.iter().all(|&x| x >= 0.0));
            prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn tabular_probabilities_are_smoothed_frequencies(corpus in prop::collection::vec((0usize..2, prop::collection::vec(3u32..8, 0..4)), 1..30), smoothing in 0.01f64..2.0) {
        let mut p = TabularPrior::new(8, 4, smoothing).unwrap();
        for (c, toks) in &corpus {
            let mut t: Vec<TokenId> = toks.clone();
            t.push(EOS);
            p.observe(*c, &LatentSequence::new(LatentScheme::Voken, t)).unwrap();
        }
        for c in 0..2 {
            let counts = p.counts(c, &[]);
            let total: u64 = counts.iter().sum();
            let probs = p.next_probs(c, &[]);
            for (k, &n) in counts.iter().enumerate() {
                let want = (n as f64 + smoothing) / (total as f64 + smoothing * counts.len() as f64);
                prop_assert!((probs[k] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn first_token_entropy_rises_with_temperature(
        corpus in prop::collection::vec((0usize..1, prop::collection::vec(3u32..8, 0..3)), 1..20),
        t1 in 0.05f64..5.0,
        t2 in 0.05f64..5.0,
    ) {
        let mut p = TabularPrior::new(8, 4, 0.5).unwrap();
        for (c, toks) in &corpus {
            let mut t: Vec<TokenId> = toks.clone();
            t.push(EOS);
            p.observe(*c, &LatentSequence::new(LatentScheme::Voken, t)).unwrap();
        }
        let prior = ArPrior::Tabular(p);
        let (lo, hi) = (t1.min(t2), t1.max(t2));
        let (e_lo, e_hi) = (prior.first_token_entropy(0, lo).unwrap(), prior.first_token_entropy(0, hi).unwrap());
        prop_assert!(e_lo <= e_hi + 1e-12, "{} > {}", e_lo, e_hi);
        prop_assert!(e_hi <= entropy(&[1.0 / 7.0; 7]) + 1e-12);
    }
}

/// Tokens of `( a , b , c , d )` without validation.
fn box_tokens(vals: &[u32], v: &Vocab) -> Vec<TokenId> {
    let mut out = vec![v.punct('(').unwrap()];
    for (i, x) in vals.iter().enumerate() {
        if i > 0 {
            out.push(v.punct(',').unwrap());
        }
        out.extend(x.to_string().chars().map(|c| v.digit(c.to_digit(10).unwrap()).unwrap()));
    }
    out.push(v.punct(')').unwrap());
    out
}
