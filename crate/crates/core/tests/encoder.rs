mod common;

use common::{random_array, rel_err};
use flex_core::analysis::token_responses;
use flex_core::autodiff::{DiffArray, ParamStore, Tape};
use flex_core::patchify::{
    baseline_scene, projector, resize_matrix, resize_tokens, PatchifierConfig, Patchifier, TokenGrid,
};
use flex_core::scene::{EncoderConfig, EncoderVariant, SceneEncoder};
use flex_core::Error;

fn grids(tape: &mut Tape, cams: usize, steps: usize, n: (usize, usize), d: usize, seed: u64) -> Vec<TokenGrid> {
    let mut out = Vec::new();
    for t in 0..steps {
        for c in 0..cams {
            let tokens = tape.constant(random_array(&[n.0 * n.1, d], seed + (t * cams + c) as u64));
            out.push(TokenGrid { tokens, rows: n.0, cols: n.1, camera_id: c as u32, timestep_index: t });
        }
    }
    out
}

fn encoder(variant: EncoderVariant, k: usize, d: usize, layers: usize) -> (ParamStore, SceneEncoder) {
    let mut store = ParamStore::new(5);
    let enc = SceneEncoder::new(&mut store, "encoder", EncoderConfig { k, layers, heads: 2, d_enc: d, variant }).unwrap();
    (store, enc)
}

#[test]
fn bilinear_four_to_two_matches_hand_oracle() {
    let mut tape = Tape::detached();
    let vals: Vec<f32> = (0..16).map(|i| (i * i) as f32 * 0.1).collect();
    let tokens = tape.constant(DiffArray::new(&[16, 1], vals.clone()).unwrap());
    let g = TokenGrid { tokens, rows: 4, cols: 4, camera_id: 0, timestep_index: 0 };
    let r = resize_tokens(&mut tape, g, (2, 2)).unwrap();
    // Half-pixel centers: output (i, j) samples source (2i + 0.5, 2j + 0.5).
    let at = |r: usize, c: usize| vals[r * 4 + c];
    for i in 0..2 {
        for j in 0..2 {
            let want = (at(2 * i, 2 * j) + at(2 * i, 2 * j + 1) + at(2 * i + 1, 2 * j) + at(2 * i + 1, 2 * j + 1)) / 4.0;
            assert!((tape.data(r.tokens)[i * 2 + j] - want).abs() < 1e-6);
        }
    }
}

#[test]
fn resize_identity_and_constants() {
    let mut tape = Tape::detached();
    let g = grids(&mut tape, 1, 1, (4, 8), 3, 1)[0];
    let same = resize_tokens(&mut tape, g, (4, 8)).unwrap();
    assert_eq!(tape.data(same.tokens), tape.data(g.tokens));
    let c = tape.constant(DiffArray::filled(&[32, 3], 0.37));
    let cg = TokenGrid { tokens: c, ..g };
    for target in [(1, 1), (2, 3), (3, 5), (7, 9), (8, 16)] {
        let r = resize_tokens(&mut tape, cg, target).unwrap();
        assert_eq!(tape.shape(r.tokens), &[target.0 * target.1, 3]);
        assert!(tape.data(r.tokens).iter().all(|v| (v - 0.37).abs() < 1e-6));
    }
    let m = resize_matrix((4, 8), (3, 5));
    for row in m.chunks(32) {
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn full_scale_grid_is_expressible() {
    let cfg = PatchifierConfig { image_height: 320, image_width: 512, patch_size: 16, d_enc: 4, ..Default::default() };
    cfg.validate().unwrap();
    assert_eq!(cfg.tokens_per_image(), 640);
    let mut store = ParamStore::new(0);
    let p = Patchifier::new(&mut store, cfg).unwrap();
    let mut tape = Tape::no_grad(&store);
    let img = vec![0.5f32; 320 * 512 * 3];
    let g = p.patchify(&mut tape, &img, 0, 0).unwrap();
    let r = resize_tokens(&mut tape, g, (10, 16)).unwrap();
    assert_eq!(r.len(), 160);
}

#[test]
fn baseline_scene_rows_and_order() {
    let mut store = ParamStore::new(2);
    let proj = projector(&mut store, "baseline_proj", 4, 8).unwrap();
    let mut tape = Tape::no_grad(&store);
    let gs = grids(&mut tape, 2, 9, (4, 8), 4, 3);
    let s = baseline_scene(&mut tape, &gs, &proj).unwrap();
    assert_eq!(tape.shape(s), &[576, 8]);
    let mut shuffled = gs.clone();
    shuffled.reverse();
    shuffled.swap(3, 11);
    let s2 = baseline_scene(&mut tape, &shuffled, &proj).unwrap();
    assert_eq!(tape.data(s), tape.data(s2));
    let mut bad = gs.clone();
    bad[4].rows = 2;
    assert!(baseline_scene(&mut tape, &bad, &proj).is_err());

    // 2 cameras x 9 steps x 160 tokens
    let big = grids(&mut tape, 2, 9, (10, 16), 4, 4);
    let s3 = baseline_scene(&mut tape, &big, &proj).unwrap();
    assert_eq!(tape.shape(s3)[0], 2880);
}

#[test]
fn projection_zero_weights_and_gradients() {
    let mut store = ParamStore::new(3);
    let proj = projector(&mut store, "proj", 6, 5).unwrap();
    let x = random_array(&[4, 6], 9);
    let checks = common::check_params(&store, 1e-2, 8, |t| {
        let xv = t.constant(x.clone());
        let y = proj.forward(t, xv).unwrap();
        common::weighted_sum(t, y, 2)
    });
    for (name, a, n) in checks {
        assert!(rel_err(a, n, 1e-2) < 1e-2, "{name}: {a} vs {n}");
    }
    let mut zero = store.clone();
    for (_, p) in zero.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut tape = Tape::no_grad(&zero);
    let xv = tape.constant(x);
    let y = proj.forward(&mut tape, xv).unwrap();
    assert_eq!(tape.shape(y), &[4, 5]);
    assert!(tape.data(y).iter().all(|&v| v == 0.0));
}

#[test]
fn camera_embedding_offsets_are_rank_one() {
    let (store, enc) = encoder(EncoderVariant::JointSelf, 18, 8, 1);
    let mut tape = Tape::no_grad(&store);
    let g = grids(&mut tape, 1, 1, (2, 3), 8, 7)[0];
    let a = enc.positional.add_positional(&mut tape, TokenGrid { camera_id: 0, ..g }).unwrap();
    let b = enc.positional.add_positional(&mut tape, TokenGrid { camera_id: 3, ..g }).unwrap();
    let cam = store.get(enc.positional.camera).value.data().to_vec();
    let want: Vec<f32> = (0..8).map(|j| cam[j] - cam[3 * 8 + j]).collect();
    for (ra, rb) in tape.data(a.tokens).chunks(8).zip(tape.data(b.tokens).chunks(8)) {
        for j in 0..8 {
            assert!((ra[j] - rb[j] - want[j]).abs() < 1e-5);
        }
    }
    let unknown = TokenGrid { camera_id: 9, ..g };
    assert!(matches!(enc.positional.add_positional(&mut tape, unknown), Err(Error::UnknownCamera(9))));
}

#[test]
fn zero_embeddings_are_identity() {
    let (mut store, enc) = encoder(EncoderVariant::JointSelf, 18, 8, 1);
    for (_, p) in store.iter_mut().filter(|(_, p)| p.name.starts_with("encoder.pe")) {
        p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut tape = Tape::no_grad(&store);
    let g = grids(&mut tape, 1, 1, (2, 3), 8, 8)[0];
    let out = enc.positional.add_positional(&mut tape, TokenGrid { timestep_index: 4, ..g }).unwrap();
    assert_eq!(tape.data(out.tokens), tape.data(g.tokens));
}

#[test]
fn distinct_timesteps_embed_distinctly() {
    let (store, enc) = encoder(EncoderVariant::JointSelf, 18, 8, 1);
    let mut tape = Tape::no_grad(&store);
    let te = enc.positional.time_embed(&mut tape, &(0..9).collect::<Vec<_>>()).unwrap();
    let rows: Vec<&[f32]> = tape.data(te).chunks(8).collect();
    for i in 0..9 {
        for j in i + 1..9 {
            assert_ne!(rows[i], rows[j]);
        }
    }
}

#[test]
fn output_is_k_rows_for_any_rig() {
    for variant in EncoderVariant::ALL {
        for cams in [2, 4, 7] {
            let k = cams * 9;
            let (store, enc) = encoder(variant, k, 8, 1);
            let mut tape = Tape::no_grad(&store);
            for n in [(1, 1), (2, 3)] {
                let gs = grids(&mut tape, cams, 9, n, 8, 1);
                let s = enc.encode(&mut tape, &gs).unwrap();
                assert_eq!(tape.shape(s.values), &[k, 8], "{variant:?} C={cams} N={n:?}");
            }
        }
    }
}

#[test]
fn divisibility_is_enforced() {
    let (store, enc) = encoder(EncoderVariant::JointSelf, 20, 8, 1);
    let mut tape = Tape::no_grad(&store);
    let gs = grids(&mut tape, 2, 9, (1, 2), 8, 1);
    assert!(matches!(enc.encode(&mut tape, &gs), Err(Error::Config(_))));
    let (store, enc) = encoder(EncoderVariant::PerImageSelf, 27, 8, 1);
    let mut tape = Tape::no_grad(&store);
    let gs = grids(&mut tape, 2, 9, (1, 2), 8, 1);
    assert!(matches!(enc.encode(&mut tape, &gs), Err(Error::Config(_))));
}

fn sensitivity(variant: EncoderVariant, cams: usize) -> Vec<Vec<f32>> {
    let steps = 3;
    let k = 2 * cams * steps;
    let (store, enc) = encoder(variant, k, 8, 2);
    let mut tape = Tape::no_grad(&store);
    let base = grids(&mut tape, cams, steps, (2, 2), 8, 40);
    let s0 = enc.encode(&mut tape, &base).unwrap();
    let s0 = tape.data(s0.values).to_vec();
    let mut per_image = Vec::new();
    for i in 0..base.len() {
        let mut gs = base.clone();
        let noisy = tape.constant(random_array(&[4, 8], 900 + i as u64));
        gs[i].tokens = tape.add(gs[i].tokens, noisy).unwrap();
        let s = enc.encode(&mut tape, &gs).unwrap();
        let delta: Vec<f32> = tape.data(s.values).chunks(8).zip(s0.chunks(8)).map(|(a, b)| {
            a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
        }).collect();
        per_image.push(delta);
    }
    per_image
}

#[test]
fn per_image_variants_are_local_and_joint_is_global() {
    for variant in [EncoderVariant::PerImageSelf, EncoderVariant::PerImageCross] {
        let sens = sensitivity(variant, 2);
        for (i, rows) in sens.iter().enumerate() {
            for (r, &d) in rows.iter().enumerate() {
                if r / 2 == i {
                    assert!(d > 0.0, "{variant:?} image {i} row {r}");
                } else {
                    assert_eq!(d, 0.0, "{variant:?} image {i} leaked into row {r}");
                }
            }
        }
    }
    for variant in [EncoderVariant::JointSelf, EncoderVariant::JointCross] {
        for rows in sensitivity(variant, 2) {
            assert!(rows.iter().all(|&d| d > 0.0), "{variant:?}");
        }
    }
}

#[test]
fn joint_cross_never_writes_image_tokens() {
    let (store, enc) = encoder(EncoderVariant::JointCross, 18, 8, 2);
    let mut tape = Tape::no_grad(&store);
    let gs = grids(&mut tape, 2, 9, (2, 2), 8, 3);
    let before: Vec<Vec<f32>> = gs.iter().map(|g| tape.data(g.tokens).to_vec()).collect();
    let enc_out = enc.encode_recorded(&mut tape, &gs).unwrap();
    for (g, b) in gs.iter().zip(&before) {
        assert_eq!(tape.data(g.tokens), &b[..]);
    }
    assert_eq!(enc_out.inputs.len(), 18);
}

#[test]
fn unembedded_joint_encoder_ignores_image_order() {
    let (mut store, enc) = encoder(EncoderVariant::JointSelf, 18, 8, 2);
    for (_, p) in store.iter_mut().filter(|(_, p)| p.name.starts_with("encoder.pe")) {
        p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut tape = Tape::no_grad(&store);
    let gs = grids(&mut tape, 2, 9, (2, 2), 8, 3);
    let a = enc.encode(&mut tape, &gs).unwrap();
    // Same tags, image contents permuted between slots.
    let mut swapped = gs.clone();
    let (t0, t1) = (swapped[0].tokens, swapped[17].tokens);
    swapped[0].tokens = t1;
    swapped[17].tokens = t0;
    let (t2, t3) = (swapped[4].tokens, swapped[9].tokens);
    swapped[4].tokens = t3;
    swapped[9].tokens = t2;
    let b = enc.encode(&mut tape, &swapped).unwrap();
    for (x, y) in tape.data(a.values).iter().zip(tape.data(b.values)) {
        assert!((x - y).abs() < 1e-5);
    }
}

#[test]
fn scene_init_receives_gradient() {
    let (store, enc) = encoder(EncoderVariant::JointSelf, 18, 8, 2);
    let mut tape = Tape::new(&store);
    let gs = grids(&mut tape, 2, 9, (2, 2), 8, 3);
    let s = enc.encode(&mut tape, &gs).unwrap();
    let loss = common::weighted_sum(&mut tape, s.values, 1);
    tape.backward(loss).unwrap();
    let g = tape
        .param_grads()
        .into_iter()
        .find(|(id, _)| *id == enc.scene_init)
        .unwrap()
        .1;
    assert!(g.iter().map(|x| x * x).sum::<f32>() > 0.0);
}

#[test]
fn encoder_gradients_match_finite_differences() {
    for variant in EncoderVariant::ALL {
        let (store, enc) = encoder(variant, 4, 4, 2);
        let inputs: Vec<DiffArray> = (0..4).map(|i| random_array(&[2, 4], 70 + i)).collect();
        let checks = common::check_params(&store, 1e-2, 3, |tape| {
            let gs: Vec<TokenGrid> = inputs
                .iter()
                .enumerate()
                .map(|(i, a)| TokenGrid {
                    tokens: tape.constant(a.clone()),
                    rows: 1,
                    cols: 2,
                    camera_id: (i % 2) as u32,
                    timestep_index: i / 2,
                })
                .collect();
            let s = enc.encode(tape, &gs).unwrap();
            common::weighted_sum(tape, s.values, 3)
        });
        for (name, a, n) in checks {
            assert!(rel_err(a, n, 1e-2) < 1e-2, "{variant:?} {name}: {a} vs {n}");
        }
    }
}

#[test]
fn attention_record_shapes_and_consistency() {
    let (store, enc) = encoder(EncoderVariant::JointSelf, 18, 8, 2);
    let mut tape = Tape::no_grad(&store);
    let gs = grids(&mut tape, 2, 9, (2, 3), 8, 3);
    let plain = enc.encode(&mut tape, &gs).unwrap();
    let plain = tape.data(plain.values).to_vec();
    let full = enc.encode_recorded(&mut tape, &gs).unwrap();
    let probs = *full.probs.last().unwrap();
    let kk = 18 + 2 * 9 * 6;
    assert_eq!(tape.shape(probs), &[2, kk, kk]);
    for row in tape.data(probs).chunks(kk) {
        assert!((row.iter().map(|&x| x as f64).sum::<f64>() - 1.0).abs() < 1e-6);
    }
    let (scene, rec) = enc.attention_record(&mut tape, &gs).unwrap();
    assert_eq!(tape.data(scene.values), &plain[..]);
    assert_eq!((rec.heads, rec.k, rec.keys()), (2, 18, 108));
    assert_eq!(rec.weights.len(), 2 * 18 * 108);

    // Head-mean then per-token max, straight from the full matrix.
    let full_probs = tape.data(probs);
    let responses = token_responses(&rec).unwrap();
    for (q, r) in responses.iter().enumerate() {
        let mut best = f64::NEG_INFINITY;
        for key in 18..kk {
            let m = (0..2).map(|h| full_probs[(h * kk + q) * kk + key] as f64).sum::<f64>() / 2.0;
            best = best.max(m);
        }
        assert_eq!(r.max_response, best);
    }

    let (store, per) = encoder(EncoderVariant::PerImageSelf, 18, 8, 1);
    let mut tape = Tape::no_grad(&store);
    let gs = grids(&mut tape, 2, 9, (2, 3), 8, 3);
    assert!(per.attention_record(&mut tape, &gs).is_err());
}

#[test]
fn frozen_patchifier_is_untouched_by_a_step() {
    use flex_core::optim::{AdamW, AdamWConfig};
    let mut store = ParamStore::new(4);
    let p = Patchifier::new(&mut store, PatchifierConfig { d_enc: 8, depth: 2, heads: 2, ..Default::default() }).unwrap();
    let w = flex_core::nn::Linear::new(&mut store, "head", 8, 1).unwrap();
    store.set_frozen_prefix(flex_core::patchify::PATCHIFIER_PREFIX, true);
    let before = store.clone();
    let mut opt = AdamW::new(AdamWConfig::default(), &store);
    let img = vec![0.3f32; 32 * 64 * 3];
    let grads = {
        let mut tape = Tape::new(&store);
        let g = p.patchify(&mut tape, &img, 0, 0).unwrap();
        let y = w.forward(&mut tape, g.tokens).unwrap();
        let l = tape.mean(y);
        tape.backward(l).unwrap();
        tape.param_grads()
    };
    store.zero_grads();
    store.accumulate(&grads).unwrap();
    opt.step(&mut store, 1e-2).unwrap();
    for ((_, a), (_, b)) in store.iter().zip(before.iter()) {
        let same = a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        assert_eq!(same, a.name.starts_with("patchifier."), "{}", a.name);
    }
}
