mod common;

use common::{catalog, rand_frames, randomize, tiny_model_config};
use dualattn::biasing::{
    format_catalog, parse_catalog, write_trace_csv, BiasMode, CatalogEntry, EntryKind, Mha, Segment, SegmentMask,
};
use dualattn::model::Model;
use dualattn::nn::{dense_forward, kernels::lstm_sequence, Init, ParamStore, Tensor};
use dualattn::runtime::{process_stream, AudioStream, DecodeOptions, OracleBoundary};
use dualattn::transducer::{Dense, EncoderPath};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn biased_model(mode: BiasMode, seed: u64) -> Model {
    let mut m = Model::new(&tiny_model_config(mode), seed).unwrap();
    // Non-zero output projections so the attention actually moves the frame.
    randomize(&mut m.store, "biasing.", 0.8, seed + 100);
    m
}

#[test]
fn catalog_text_round_trip_and_rejections() {
    let src = "ww\they shaq\nproper_name\tbob\n\nww\tnova\n";
    let cat = parse_catalog(src).unwrap();
    assert_eq!(cat.len(), 3);
    assert_eq!(cat[1].kind, EntryKind::ProperName);
    assert_eq!(parse_catalog(&format_catalog(&cat)).unwrap(), cat);
    assert!(parse_catalog("contact\tbob").is_err());
    assert!(parse_catalog("ww hey").is_err());
    assert!(CatalogEntry::wake_word("").is_err());
    assert!(CatalogEntry::new(EntryKind::NoBias, "x").is_err());
    assert!(CatalogEntry::proper_name("b0b").is_err());
}

#[test]
fn mode_names_parse_back() {
    for m in [BiasMode::PretrainedBase, BiasMode::SingleAttnBase, BiasMode::SingleAttnCatalogMask, BiasMode::DualAttn] {
        assert_eq!(BiasMode::parse(m.name()).unwrap(), m);
    }
    assert!(BiasMode::parse("triple-attn").is_err());
}

#[test]
fn context_encoder_is_pure_and_matches_composition() {
    let m = biased_model(BiasMode::DualAttn, 1);
    let b = m.biasing().unwrap();
    let ids = [8, 5, 25];
    let e1 = b.ctx.encode(&m.store, &ids).unwrap();
    let e2 = b.ctx.encode(&m.store, &ids).unwrap();
    assert_eq!(e1, e2);

    // Oracle: embedding lookup, two LSTM sweeps, final states, dense.
    let s = &m.store;
    let table = s.by_name("biasing.ctx.embed").unwrap();
    let e = table.tensor.cols();
    let rows: Vec<Vec<f64>> = ids.iter().map(|&i| table.tensor.row(i).to_vec()).collect();
    let x = Tensor::from_rows(&rows).unwrap();
    let lw = |p: &str| {
        dualattn::nn::LstmWeights::from_tensors(
            &s.by_name(&format!("{p}.w_ih")).unwrap().tensor,
            &s.by_name(&format!("{p}.w_hh")).unwrap().tensor,
            &s.by_name(&format!("{p}.b")).unwrap().tensor,
        )
        .unwrap()
    };
    assert_eq!(x.cols(), e);
    let f = lstm_sequence(&lw("biasing.ctx.fwd"), &x, false).unwrap();
    let bw = lstm_sequence(&lw("biasing.ctx.bwd"), &x, true).unwrap();
    let mut both = f.row(ids.len() - 1).to_vec();
    both.extend_from_slice(bw.row(0));
    let out = dense_forward(
        &Tensor::matrix(1, both.len(), both).unwrap(),
        &s.by_name("biasing.ctx.out.w").unwrap().tensor,
        &s.by_name("biasing.ctx.out.b").unwrap().tensor,
    )
    .unwrap();
    for (a, b) in e1.data().iter().zip(out.data()) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    // Length one: both directions see exactly the single step.
    let one = b.ctx.encode(&m.store, &[3]).unwrap();
    assert_eq!(one.numel(), 3);
    assert!(b.ctx.encode(&m.store, &[]).is_err());
    assert!(b.ctx.encode(&m.store, &[0]).is_err());
}

#[test]
fn cache_rows_order_and_nobias() {
    let m = biased_model(BiasMode::DualAttn, 2);
    let b = m.biasing().unwrap();
    let empty = b.build_cache(&m.store, &[]).unwrap();
    assert_eq!(empty.rows(), 1);
    assert_eq!(empty.entries()[0].kind, EntryKind::NoBias);

    let wws: Vec<String> = (0..6).map(|i| format!("ww{}", to_letters(i))).collect();
    let names: Vec<String> = (0..300).map(|i| format!("n{}", to_letters(i))).collect();
    let ww_refs: Vec<&str> = wws.iter().map(|s| s.as_str()).collect();
    let name_refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    let cat = catalog(&ww_refs, &name_refs);
    let cache = b.build_cache(&m.store, &cat).unwrap();
    assert_eq!(cache.rows(), 307);
    assert_eq!(cache.nobias_row(), 306);
    assert_eq!(cache.entries()[306].surface, "");
    assert_eq!(cache.mask(Segment::LeadIn).active_count, 7);
    assert_eq!(cache.mask(Segment::PostWw).active_count, 301);
    assert_eq!(cache.mask(Segment::Full).active_count, 307);

    let ww_only = b.build_cache(&m.store, &cat[..6]).unwrap();
    assert_eq!(ww_only.mask(Segment::PostWw).active_count, 1);

    // Permuting the catalog permutes the rows.
    let small = catalog(&["nova", "ziggy"], &["bob", "kat"]);
    let perm = [2usize, 0, 3, 1];
    let permuted: Vec<CatalogEntry> = perm.iter().map(|&i| small[i].clone()).collect();
    let c1 = b.build_cache(&m.store, &small).unwrap();
    let c2 = b.build_cache(&m.store, &permuted).unwrap();
    for (j, &i) in perm.iter().enumerate() {
        assert_eq!(c1.embeddings().row(i), c2.embeddings().row(j));
    }
    assert_eq!(c1.embeddings().row(4), c2.embeddings().row(4));
}

fn to_letters(mut i: usize) -> String {
    let mut s = String::new();
    loop {
        s.push((b'a' + (i % 26) as u8) as char);
        i /= 26;
        if i == 0 {
            return s;
        }
    }
}

#[test]
fn segment_masks_follow_kinds() {
    let kinds = [EntryKind::WakeWord, EntryKind::ProperName, EntryKind::WakeWord, EntryKind::NoBias];
    assert_eq!(SegmentMask::new(kinds, Segment::LeadIn).active_rows(), vec![0, 2, 3]);
    assert_eq!(SegmentMask::new(kinds, Segment::PostWw).active_rows(), vec![1, 3]);
    assert_eq!(SegmentMask::new(kinds, Segment::Full).active_count, 4);
    assert_eq!(BiasMode::DualAttn.segment(EncoderPath::Small), Segment::LeadIn);
    assert_eq!(BiasMode::DualAttn.segment(EncoderPath::Large), Segment::PostWw);
    assert_eq!(BiasMode::SingleAttnCatalogMask.segment(EncoderPath::Small), Segment::LeadIn);
    assert_eq!(BiasMode::SingleAttnCatalogMask.segment(EncoderPath::Large), Segment::Full);
    assert_eq!(BiasMode::SingleAttnBase.segment(EncoderPath::Small), Segment::Full);
}

/// One-dimensional attention with hand-set weights.
fn scalar_mha(v_out: f64) -> (ParamStore, Mha) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let mut dense = |name: &str| Dense::register(&mut store, name, 1, 1, false, Init::Zeros, &mut rng).unwrap();
    let mha = Mha { q: dense("q"), k: dense("k"), v: dense("v"), o: dense("o"), query_dim: 1, proj_dim: 1 };
    for (d, val) in [(mha.q, 1.0), (mha.k, 1.0), (mha.v, 1.0), (mha.o, v_out)] {
        store.get_mut(d.w).tensor.data_mut()[0] = val;
    }
    (store, mha)
}

#[test]
fn attention_hand_softmax_and_single_row() {
    // Only the shape of this cache matters; the embeddings are replaced.
    let mut cfg = tiny_model_config(BiasMode::DualAttn);
    cfg.biasing.ctx_dim = 1;
    let m1 = Model::new(&cfg, 3).unwrap();
    let cache = m1.biasing().unwrap().build_cache(&m1.store, &catalog(&["nova"], &[])).unwrap();
    let cache = cache.with_embeddings(Tensor::matrix(2, 1, vec![1.0, -1.0]).unwrap()).unwrap();
    let (store, mha) = scalar_mha(1.0);
    let (bias, w) = mha.attend(&store, &[1.0], &cache, &cache.mask(Segment::Full)).unwrap();
    let e = 1f64.exp();
    let w0 = e / (e + 1.0 / e);
    assert!((w[0] - w0).abs() < 1e-12 && (w[0] - 0.8808).abs() < 1e-4);
    assert!((w[1] - (1.0 - w0)).abs() < 1e-12);
    assert!((bias[0] - (w0 * 1.0 + (1.0 - w0) * -1.0)).abs() < 1e-12);

    // Only the no-bias row active: weight 1, context is its value.
    let (bias, w) = mha.attend(&store, &[1.0], &cache, &cache.mask(Segment::PostWw)).unwrap();
    assert_eq!(w, vec![0.0, 1.0]);
    assert_eq!(bias, vec![-1.0]);

    // Two-row dominance: a real entry scoring above no-bias takes > 0.5.
    let (_, w) = mha.attend(&store, &[0.3], &cache, &cache.mask(Segment::LeadIn)).unwrap();
    assert!(w[0] > 0.5);
}

#[test]
fn zero_output_projection_is_residual_identity() {
    let mut m = biased_model(BiasMode::DualAttn, 4);
    for p in m.store.iter_mut().filter(|p| p.name.ends_with(".o.w")) {
        p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let b = m.biasing().unwrap();
    let cache = b.build_cache(&m.store, &catalog(&["nova", "amigo"], &["bob"])).unwrap();
    let h = vec![0.3, -0.2, 0.9];
    assert_eq!(b.apply(&m.store, &h, EncoderPath::Small, &cache).unwrap(), h);
    // Empty catalog still runs through the no-bias row.
    let empty = b.build_cache(&m.store, &[]).unwrap();
    assert_eq!(b.apply(&m.store, &h, EncoderPath::Small, &empty).unwrap(), h);
}

#[test]
fn masked_rows_never_influence_attention() {
    let m = biased_model(BiasMode::DualAttn, 5);
    let b = m.biasing().unwrap();
    let cache = b.build_cache(&m.store, &catalog(&["nova", "amigo", "ziggy"], &["bob", "kat", "lulu"])).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..100 {
        let path = if rng.gen_bool(0.5) { EncoderPath::Small } else { EncoderPath::Large };
        let width = m.transducer().enc_dim(path);
        let h: Vec<f64> = (0..width).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mask = b.mask_for(path, &cache);
        let mut emb = cache.embeddings().clone();
        for r in 0..cache.rows() {
            if !mask.active[r] {
                emb.row_mut(r).iter_mut().for_each(|v| *v += rng.gen_range(-5.0..5.0));
            }
        }
        let perturbed = cache.with_embeddings(emb).unwrap();
        let a = b.mha(path).attend(&m.store, &h, &cache, &mask).unwrap();
        let c = b.mha(path).attend(&m.store, &h, &perturbed, &mask).unwrap();
        assert_eq!(a, c);
        let total: f64 = a.1.iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
        for r in 0..cache.rows() {
            if !mask.active[r] {
                assert_eq!(a.1[r], 0.0);
            }
        }
    }
}

#[test]
fn trace_rows_shapes_and_csv() {
    let m = biased_model(BiasMode::DualAttn, 7);
    let b = m.biasing().unwrap();
    let cache = b.build_cache(&m.store, &catalog(&["nova", "amigo"], &["bob", "kat"])).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let stream = AudioStream { id: "u".into(), frames: rand_frames(&mut rng, 11, 3), ww_end_frame: 4 };
    let opts = DecodeOptions { max_symbols_per_frame: 2, trace: true };
    let out = process_stream(&m, &stream, &OracleBoundary, Some(&cache), opts).unwrap();
    let trace = out.trace.unwrap();
    assert_eq!(trace.weights.rows(), out.small_frames + out.large_frames);
    assert_eq!(out.small_frames, 3);
    assert_eq!(out.large_frames, 3);
    for (k, path) in trace.paths.iter().enumerate() {
        let row = trace.weights.row(k);
        let mask = b.mask_for(*path, &cache);
        let total: f64 = row.iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
        for r in 0..cache.rows() {
            if !mask.active[r] {
                assert_eq!(row[r], 0.0);
            }
        }
    }
    let mut csv = Vec::new();
    write_trace_csv(&trace, &cache, &mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "frame,entry_index,kind,surface,weight");
    assert_eq!(lines.len(), 1 + trace.weights.rows() * cache.rows());
    assert!(lines[5].starts_with("0,4,no_bias,,"));
}

#[test]
fn single_attn_shares_key_value_projections() {
    let m = Model::new(&tiny_model_config(BiasMode::SingleAttnBase), 9).unwrap();
    let b = m.biasing().unwrap();
    assert_eq!(b.mha(EncoderPath::Small).k.w, b.mha(EncoderPath::Large).k.w);
    assert_eq!(b.mha(EncoderPath::Small).v.w, b.mha(EncoderPath::Large).v.w);
    assert_ne!(b.mha(EncoderPath::Small).q.w, b.mha(EncoderPath::Large).q.w);
    let d = Model::new(&tiny_model_config(BiasMode::DualAttn), 9).unwrap();
    let db = d.biasing().unwrap();
    assert_ne!(db.mha(EncoderPath::Small).k.w, db.mha(EncoderPath::Large).k.w);
    assert_eq!(db.mha(EncoderPath::Small).proj_dim, 2);
    assert_eq!(db.mha(EncoderPath::Large).proj_dim, 3);
    assert!(Model::new(&tiny_model_config(BiasMode::PretrainedBase), 9).unwrap().biasing().is_none());
}
