#![allow(dead_code)]

use mupad::model::{ConditionSet, CrossAttnVariant, Denoiser, ModelConfig};
use mupad::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Small enough for finite-difference checks.
pub fn tiny_config(variant: CrossAttnVariant) -> ModelConfig {
    ModelConfig {
        depth: 2,
        dim: 8,
        heads: 2,
        patch: 2,
        latent_shape: [3, 4, 4],
        struct_channels: 0,
        image_cond_dim: 5,
        text_vocab: 7,
        text_max_len: 6,
        rna_dim: 6,
        rna_tokens: 2,
        cls_dim: 4,
        mlp_ratio: 2,
        variant,
        num_groups: 0,
        use_z_cls: true,
        token_skip: true,
    }
}

/// Overwrites every parameter (including zero-initialized gates and heads) with noise.
pub fn randomize(model: &mut Denoiser, seed: u64, std: f64) {
    let mut r = rng(seed);
    for t in model.params.tensors_mut() {
        *t = Tensor::randn(t.shape(), std, &mut r);
    }
}

pub fn full_condition(cfg: &ModelConfig, seed: u64) -> ConditionSet {
    let mut r = rng(seed);
    ConditionSet::empty()
        .with_image(Tensor::randn(&[3, cfg.image_cond_dim], 1.0, &mut r))
        .with_text(vec![2, 5, 1])
        .with_rna(Tensor::randn(&[cfg.rna_dim], 1.0, &mut r).into_data())
        .with_z_cls(Tensor::randn(&[cfg.cls_dim], 1.0, &mut r).into_data())
}

pub fn latent(cfg: &ModelConfig, batch: usize, seed: u64) -> Tensor {
    let [c, h, w] = cfg.latent_shape;
    Tensor::randn(&[batch, c, h, w], 1.0, &mut rng(seed))
}

/// Worst relative error between tape gradients of the total training loss of a randomized
/// depth-2 model and central differences, over a seeded sample of entries of every parameter.
pub fn model_grad_check(variant: CrossAttnVariant, seed: u64, entries_per_param: usize) -> f64 {
    use mupad::model::{ConditionBatch, ForwardOptions};
    use mupad::objectives::{total_loss, AlignVariant, Aligner, LossWeights};
    use mupad::tensor::check::rel_err;
    use mupad::tensor::{Bound, Tape};
    use rand::Rng;

    let mut cfg = tiny_config(variant);
    cfg.struct_channels = 1;
    cfg.num_groups = 2;
    let mut model = Denoiser::new(cfg.clone(), seed).unwrap();
    randomize(&mut model, seed + 1000, 0.15);
    let aligner = Aligner::new(AlignVariant::Mupad, cfg.dim, 3, cfg.grid(), 0, seed);
    let mut r = rng(seed + 2000);
    let [_, h, w] = cfg.latent_shape;
    let sets: Vec<ConditionSet> = (0..2)
        .map(|i| {
            let mut s = full_condition(&cfg, seed * 3 + i)
                .with_structure(Tensor::randn(&[1, h, w], 1.0, &mut r))
                .with_group(i as usize);
            if i == 1 {
                s.deactivate(mupad::model::Modality::Rna);
                s = s.with_text(vec![4]);
            }
            s
        })
        .collect();
    let cond = ConditionBatch::from_sets(&sets).unwrap();
    let z = latent(&cfg, 2, seed + 3000);
    let t = [r.random::<f64>(), r.random::<f64>()];
    let v_star = latent(&cfg, 2, seed + 4000);
    let cls_star = Tensor::randn(&[2, cfg.cls_dim], 1.0, &mut r);
    let (gh, gw) = cfg.grid();
    let teacher = Tensor::randn(&[2, 3, gh, gw], 1.0, &mut r);
    let weights = LossWeights::default();
    let n_model = model.params.len();

    let inputs: Vec<Tensor> = model
        .params
        .tensors()
        .iter()
        .chain(aligner.params.tensors())
        .cloned()
        .collect();
    let loss = |tape: &mut Tape, xs: &[Tensor], trainable: bool| {
        let vars: Vec<_> = xs
            .iter()
            .map(|x| if trainable { tape.param(x.clone()) } else { tape.constant(x.clone()) })
            .collect();
        let pm = Bound::from_vars(vars[..n_model].to_vec());
        let pa = Bound::from_vars(vars[n_model..].to_vec());
        let zv = tape.constant(z.clone());
        let opts = ForwardOptions {
            keep_features: true,
            ..Default::default()
        };
        let out = model.forward(tape, &pm, zv, &t, &cond, &opts).unwrap();
        let terms = total_loss(tape, &out, &v_star, &cls_star, &weights, &aligner, &pa, &teacher).unwrap();
        (terms.total, vars)
    };
    let mut tape = Tape::new();
    let (l, vars) = loss(&mut tape, &inputs, true);
    let grads = tape.backward(l).unwrap();
    let eval = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let (l, _) = loss(&mut tape, xs, false);
        tape.value(l).item()
    };
    let hstep = 1e-5;
    let mut worst: f64 = 0.0;
    let mut probe = inputs.clone();
    for (k, x) in inputs.iter().enumerate() {
        let g = grads.get_or_zeros(vars[k], x.shape());
        for _ in 0..entries_per_param.min(x.len()) {
            let i = r.random_range(0..x.len());
            let orig = x.data()[i];
            probe[k].data_mut()[i] = orig + hstep;
            let up = eval(&probe);
            probe[k].data_mut()[i] = orig - hstep;
            let down = eval(&probe);
            probe[k].data_mut()[i] = orig;
            worst = worst.max(rel_err(g.data()[i], (up - down) / (2.0 * hstep)));
        }
    }
    worst
}

/// Flow net trained on 1000 pairs `z1 = A z0 + b` in four dimensions; returns the net and the pairs.
pub fn train_affine_flow() -> (mupad::objectives::EmbeddingFlowNet, Tensor, Tensor) {
    use mupad::objectives::{embedding_flow_loss, EmbeddingFlowNet};
    use mupad::tensor::optim::{AdamW, AdamWConfig};
    use mupad::tensor::Tape;
    use rand::Rng;

    let dim = 4;
    let mut r = rng(5);
    let a = [
        [1.2, 0.1, 0.0, -0.1],
        [0.1, 0.9, 0.2, 0.0],
        [0.0, 0.2, 1.1, 0.1],
        [-0.1, 0.0, 0.1, 0.8],
    ];
    let b = [0.5, -0.3, 0.2, 0.1];
    let n = 1000;
    let z0 = Tensor::randn(&[n, dim], 1.0, &mut r);
    let mut z1 = vec![0.0; n * dim];
    for i in 0..n {
        for j in 0..dim {
            z1[i * dim + j] = b[j] + (0..dim).map(|k| a[j][k] * z0.data()[i * dim + k]).sum::<f64>();
        }
    }
    let z1 = Tensor::new(&[n, dim], z1).unwrap();
    let mut net = EmbeddingFlowNet::new(dim, 64, 2);
    let cfg = AdamWConfig {
        lr: 2e-3,
        ..Default::default()
    };
    let mut opt = AdamW::new(cfg, net.params.tensors());
    let batch = 64;
    for _ in 0..1500 {
        let idx: Vec<usize> = (0..batch).map(|_| r.random_range(0..n)).collect();
        let pick = |z: &Tensor| {
            Tensor::new(&[batch, dim], idx.iter().flat_map(|&i| z.data()[i * dim..(i + 1) * dim].to_vec()).collect()).unwrap()
        };
        let t: Vec<f64> = (0..batch).map(|_| r.random::<f64>()).collect();
        let mut tape = Tape::new();
        let p = net.params.bind(&mut tape, true);
        let l = embedding_flow_loss(&mut tape, &net, &p, &pick(&z0), &pick(&z1), &t).unwrap();
        let g = tape.backward(l).unwrap();
        let grads = net.params.collect_grads(&p, &g);
        opt.step(net.params.tensors_mut(), &grads).unwrap();
    }
    (net, z0, z1)
}
