mod common;

use common::{full_condition, latent, randomize, rng, tiny_config, train_affine_flow};
use mupad::conditioning::{teacher_features, StubEncoder};
use mupad::model::{ConditionBatch, ConditionSet, CrossAttnVariant, Denoiser, DenoiserOutput, ForwardOptions, Modality};
use mupad::objectives::*;
use mupad::tensor::{Tape, Tensor};

#[test]
fn denoise_loss_hand_case() {
    let mut tape = Tape::new();
    let out = DenoiserOutput {
        v_patch: tape.param(Tensor::new(&[1], vec![0.0]).unwrap()),
        v_cls: tape.param(Tensor::new(&[1], vec![1.0]).unwrap()),
        features: vec![],
        attn: vec![],
    };
    let w = LossWeights {
        patch: 1.0,
        cls: 0.1,
        align: 0.0,
    };
    let (total, patch, cls) = denoise_loss(
        &mut tape,
        &out,
        &Tensor::new(&[1], vec![2.0]).unwrap(),
        &Tensor::new(&[1], vec![1.0]).unwrap(),
        &w,
    )
    .unwrap();
    assert_eq!(tape.value(total).item(), 4.0);
    assert_eq!(tape.value(patch).item(), 4.0);
    assert_eq!(tape.value(cls).item(), 0.0);
}

struct Setup {
    model: Denoiser,
    z: Tensor,
    t: Vec<f64>,
    cond: ConditionBatch,
    teacher: Tensor,
}

fn setup(seed: u64) -> Setup {
    let cfg = tiny_config(CrossAttnVariant::Dca);
    let mut model = Denoiser::new(cfg.clone(), seed).unwrap();
    randomize(&mut model, seed + 1, 0.2);
    let cond = ConditionBatch::from_sets(&[full_condition(&cfg, seed), full_condition(&cfg, seed + 1)]).unwrap();
    let (gh, gw) = cfg.grid();
    Setup {
        z: latent(&cfg, 2, seed + 2),
        t: vec![0.3, 0.7],
        teacher: Tensor::randn(&[2, 3, gh, gw], 1.0, &mut rng(seed + 3)),
        model,
        cond,
    }
}

fn mse_oracle(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

#[test]
fn align_losses_match_elementwise_oracle() {
    let s = setup(1);
    let grid = s.model.config.grid();
    for variant in [AlignVariant::Mupad, AlignVariant::Repa] {
        let mut al = Aligner::new(variant, s.model.config.dim, 3, grid, 1, 7);
        for (i, p) in al.params.tensors_mut().iter_mut().enumerate() {
            *p = Tensor::randn(p.shape(), 0.3, &mut rng(50 + i as u64));
        }
        let mut tape = Tape::new();
        let pm = s.model.params.bind(&mut tape, false);
        let pa = al.params.bind(&mut tape, false);
        let zv = tape.constant(s.z.clone());
        let opts = ForwardOptions {
            keep_features: true,
            ..Default::default()
        };
        let out = s.model.forward(&mut tape, &pm, zv, &s.t, &s.cond, &opts).unwrap();
        let loss = al.loss(&mut tape, &pa, &out.features, &s.teacher).unwrap().unwrap();
        let feats = tape.value(out.features[1]).clone();
        // independent projection with plain loops
        let names = al.params.names().to_vec();
        let get = |n: &str| al.params.get(al.params.id(n).unwrap()).clone();
        let (b, n, d) = (2, feats.shape()[1], feats.shape()[2]);
        let (gh, gw) = grid;
        let gelu = |x: f64| 0.5 * x * (1.0 + (0.797_884_560_802_865_4 * (x + 0.044_715 * x.powi(3))).tanh());
        let pred: Vec<f64> = match variant {
            AlignVariant::Mupad => {
                let (w1, b1, w2, b2) = (get("align.cnn.w1"), get("align.cnn.b1"), get("align.cnn.w2"), get("align.cnn.b2"));
                let f = |bi: usize, c: usize, i: isize, j: isize| -> f64 {
                    if i < 0 || j < 0 || i >= gh as isize || j >= gw as isize {
                        0.0
                    } else {
                        feats.data()[(bi * n + i as usize * gw + j as usize) * d + c]
                    }
                };
                let mut hid = vec![0.0; b * d * gh * gw];
                for bi in 0..b {
                    for o in 0..d {
                        for i in 0..gh {
                            for j in 0..gw {
                                let mut acc = b1.data()[o];
                                for c in 0..d {
                                    for ki in 0..3 {
                                        for kj in 0..3 {
                                            acc += w1.data()[((o * d + c) * 3 + ki) * 3 + kj]
                                                * f(bi, c, i as isize + ki as isize - 1, j as isize + kj as isize - 1);
                                        }
                                    }
                                }
                                hid[((bi * d + o) * gh + i) * gw + j] = gelu(acc);
                            }
                        }
                    }
                }
                let mut out = vec![0.0; b * 3 * gh * gw];
                for bi in 0..b {
                    for o in 0..3 {
                        for k in 0..gh * gw {
                            let mut acc = b2.data()[o];
                            for c in 0..d {
                                acc += w2.data()[o * d + c] * hid[(bi * d + c) * gh * gw + k];
                            }
                            out[(bi * 3 + o) * gh * gw + k] = acc;
                        }
                    }
                }
                out
            }
            _ => {
                let (w1, b1, w2, b2) = (get("align.mlp.w1"), get("align.mlp.b1"), get("align.mlp.w2"), get("align.mlp.b2"));
                let mut out = Vec::new();
                for row in feats.data().chunks(d) {
                    let hid: Vec<f64> = (0..d)
                        .map(|o| gelu(b1.data()[o] + (0..d).map(|c| row[c] * w1.data()[c * d + o]).sum::<f64>()))
                        .collect();
                    for o in 0..3 {
                        out.push(b2.data()[o] + (0..d).map(|c| hid[c] * w2.data()[c * 3 + o]).sum::<f64>());
                    }
                }
                out
            }
        };
        let target = match variant {
            AlignVariant::Mupad => s.teacher.data().to_vec(),
            _ => grid_to_tokens(&s.teacher).unwrap().into_data(),
        };
        let want = mse_oracle(&pred, &target);
        assert!((tape.value(loss).item() - want).abs() < 1e-12 * want.max(1.0), "{variant:?} {names:?}");
    }
}

#[test]
fn projector_parameter_counts_differ() {
    let cnn = Aligner::new(AlignVariant::Mupad, 8, 3, (2, 2), 0, 1);
    let mlp = Aligner::new(AlignVariant::Repa, 8, 3, (2, 2), 0, 1);
    let naive = Aligner::new(AlignVariant::Naive, 8, 3, (2, 2), 0, 1);
    assert_eq!(cnn.params.numel(), 8 * 8 * 9 + 8 + 3 * 8 + 3);
    assert_eq!(mlp.params.numel(), 8 * 8 + 8 + 8 * 3 + 3);
    assert_eq!(naive.params.numel(), 0);
    assert_eq!(Aligner::middle_layer(4), 1);
    assert_eq!(Aligner::middle_layer(1), 0);
}

fn tape_sizes(variant: AlignVariant, s: &Setup) -> (usize, usize) {
    let al = Aligner::new(variant, s.model.config.dim, 3, s.model.config.grid(), 0, 3);
    let mut tape = Tape::new();
    let pm = s.model.params.bind(&mut tape, true);
    let pa = al.params.bind(&mut tape, true);
    let zv = tape.constant(s.z.clone());
    let opts = ForwardOptions {
        keep_features: true,
        ..Default::default()
    };
    let out = s.model.forward(&mut tape, &pm, zv, &s.t, &s.cond, &opts).unwrap();
    let v_star = latent(&s.model.config, 2, 9);
    let cls = Tensor::zeros(&[2, s.model.config.cls_dim]);
    let before = tape.len();
    let (_, _, _) = denoise_loss(&mut tape, &out, &v_star, &cls, &LossWeights::default()).unwrap();
    let denoise_nodes = tape.len() - before;
    let mid = tape.len();
    total_loss(&mut tape, &out, &v_star, &cls, &LossWeights::default(), &al, &pa, &s.teacher).unwrap();
    // total_loss repeats the denoise part, then the optional projector term
    (before, tape.len() - mid - denoise_nodes)
}

#[test]
fn variants_share_the_denoiser_graph() {
    let s = setup(2);
    let (m0, m_extra) = tape_sizes(AlignVariant::Mupad, &s);
    let (r0, r_extra) = tape_sizes(AlignVariant::Repa, &s);
    let (n0, n_extra) = tape_sizes(AlignVariant::Naive, &s);
    // only the projector leaves differ before the loss
    let leaves = |v| Aligner::new(v, 8, 3, (2, 2), 0, 0).params.len();
    assert_eq!(m0 - leaves(AlignVariant::Mupad), n0);
    assert_eq!(r0 - leaves(AlignVariant::Repa), n0);
    assert_eq!(n_extra, 0);
    assert!(m_extra > 0 && r_extra > 0);
}

#[test]
fn every_term_carries_gradient_and_teacher_is_frozen() {
    let s = setup(3);
    let teacher_enc = StubEncoder::teacher();
    let hash = teacher_enc.weights_hash();
    let img = Tensor::rand_uniform(&[2, 3, 16, 16], 0.0, 1.0, &mut rng(4));
    let tf = teacher_features(&teacher_enc, &img).unwrap();
    let (gh, gw) = s.model.config.grid();
    assert_eq!(tf.shape()[2..], [2, 2]);
    assert_eq!((gh, gw), (2, 2));
    let al = Aligner::new(AlignVariant::Mupad, s.model.config.dim, tf.shape()[1], (gh, gw), 0, 5);
    let opts = ForwardOptions {
        keep_features: true,
        ..Default::default()
    };
    let v_star = latent(&s.model.config, 2, 10);
    let cls = Tensor::randn(&[2, s.model.config.cls_dim], 1.0, &mut rng(11));
    for term in 0..3 {
        let mut tape = Tape::new();
        let pm = s.model.params.bind(&mut tape, true);
        let pa = al.params.bind(&mut tape, true);
        let zv = tape.constant(s.z.clone());
        let out = s.model.forward(&mut tape, &pm, zv, &s.t, &s.cond, &opts).unwrap();
        let terms = total_loss(&mut tape, &out, &v_star, &cls, &LossWeights::default(), &al, &pa, &tf).unwrap();
        let l = [terms.patch, terms.cls, terms.align.unwrap()][term];
        assert!(tape.value(l).item() > 0.0);
        let g = tape.backward(l).unwrap();
        let norm: f64 = s
            .model
            .params
            .collect_grads(&pm, &g)
            .iter()
            .map(|t| t.data().iter().map(|x| x * x).sum::<f64>())
            .sum();
        assert!(norm > 0.0, "term {term}");
    }
    assert_eq!(teacher_enc.weights_hash(), hash);
}

#[test]
fn naive_and_perfect_cases() {
    let mut tape = Tape::new();
    let v = Tensor::new(&[2, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
    let c = Tensor::new(&[2, 1], vec![0.1, 0.2]).unwrap();
    let out = DenoiserOutput {
        v_patch: tape.param(v.clone()),
        v_cls: tape.param(c.clone()),
        features: vec![],
        attn: vec![],
    };
    let al = Aligner::new(AlignVariant::Naive, 2, 1, (1, 1), 0, 0);
    let pa = al.params.bind(&mut tape, true);
    let terms = total_loss(&mut tape, &out, &v, &c, &LossWeights::default(), &al, &pa, &Tensor::zeros(&[1])).unwrap();
    assert!(terms.align.is_none());
    assert_eq!(tape.value(terms.total).item(), 0.0);
}

#[test]
fn dropout_rate_and_independence() {
    let cfg = tiny_config(CrossAttnVariant::Dca);
    let c = full_condition(&cfg, 1);
    let mut r = rng(77);
    let n = 10_000;
    let mut dropped = [0usize; 3];
    // joint table for image and text
    let mut joint = [[0usize; 2]; 2];
    for _ in 0..n {
        let d = condition_dropout(&c, DEFAULT_DROPOUT, &mut r).unwrap();
        d.validate().unwrap();
        let flags: Vec<bool> = Modality::ALL.iter().map(|&m| !d.is_active(m)).collect();
        for (k, &f) in flags.iter().enumerate() {
            dropped[k] += f as usize;
        }
        joint[flags[0] as usize][flags[1] as usize] += 1;
        if flags[0] {
            assert!(d.z_cls.is_none());
        }
    }
    for &k in &dropped {
        let rate = k as f64 / n as f64;
        assert!((0.08..=0.12).contains(&rate), "rate {rate}");
    }
    // 2x2 chi-square test of independence, one degree of freedom
    let rows = [joint[0][0] + joint[0][1], joint[1][0] + joint[1][1]];
    let cols = [joint[0][0] + joint[1][0], joint[0][1] + joint[1][1]];
    let mut chi = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            let e = rows[i] as f64 * cols[j] as f64 / n as f64;
            chi += (joint[i][j] as f64 - e).powi(2) / e;
        }
    }
    // chi-square(1) critical value at 0.01
    assert!(chi < 6.635, "chi {chi}");
    assert!(condition_dropout(&c, 1.5, &mut r).is_err());
    let all = condition_dropout(&c, 1.0, &mut r).unwrap();
    assert!(!all.any_active());
    assert_eq!(condition_dropout(&c, 0.0, &mut r).unwrap(), c);
    let empty = ConditionSet::empty();
    assert_eq!(condition_dropout(&empty, 0.5, &mut r).unwrap(), empty);
}

#[test]
fn embedding_flow_degenerate_pairs() {
    let net = EmbeddingFlowNet::new(3, 16, 1);
    let z = Tensor::randn(&[4, 3], 1.0, &mut rng(1));
    let mut tape = Tape::new();
    let p = net.params.bind(&mut tape, true);
    // zero-initialised output layer predicts 0, which is the target for identical pairs
    let l = embedding_flow_loss(&mut tape, &net, &p, &z, &z, &[0.1, 0.4, 0.6, 0.9]).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);
    assert!(embedding_flow_loss(&mut tape, &net, &p, &z, &Tensor::zeros(&[4, 2]), &[0.0; 4]).is_err());
    assert_eq!(net.params.len(), 2 * FLOW_NET_LAYERS);
}

#[test]
fn embedding_flow_learns_affine_map() {
    let (net, z0, z1) = train_affine_flow();
    let end = net.transport(&z0, 50).unwrap();
    let err = end.sub(&z1).unwrap().norm() / z1.norm();
    assert!(err < 0.1, "relative error {err}");
}
