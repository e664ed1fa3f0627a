use mupad::conditioning::{
    group_channels, hed_augment, latent_decode, latent_encode, pathway_scores, rna_preprocess,
    GeneSetTable, StainMatrix, StainPerturbation, StubEncoder, TextVocab, GENE_COUNT,
    PATHWAY_COUNT, UNK_ID,
};
use mupad_tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CONDITION_HASH: &str = "e12215e5a6e4163ee800c94a4e1f34d17506c0efa595fb478e0cad0ced2e0115";
const TEACHER_HASH: &str = "16ccf4de97f78ed5ffe5c06b68de1846009f1a5dbdb4b5951385382877040c47";

fn random_counts(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<f64>) {
    let counts = (0..n).map(|_| rng.random_range(0.0..500.0_f64).floor()).collect();
    let lengths = (0..n).map(|_| rng.random_range(200.0..5000.0_f64).floor()).collect();
    (counts, lengths)
}

#[test]
fn encoder_weights_are_stable_across_processes() {
    assert_eq!(StubEncoder::condition().weights_hash(), CONDITION_HASH);
    assert_eq!(StubEncoder::teacher().weights_hash(), TEACHER_HASH);
}

#[test]
fn gene_set_table_shape() {
    let t = GeneSetTable::standard();
    assert_eq!(t.len(), PATHWAY_COUNT);
    assert!(t.gene_span() <= GENE_COUNT);
    for (_, members) in &t.sets {
        assert!((1..=8).contains(&members.len()));
    }
}

#[test]
fn tpm_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let (counts, lengths) = random_counts(&mut rng, 64);
        let exclude = [3usize, 17, 40];
        let tpm = rna_preprocess(&counts, &lengths, &exclude).unwrap();
        let kept: Vec<usize> = (0..64).filter(|i| !exclude.contains(i)).collect();
        let denom: f64 = kept.iter().map(|&i| counts[i] / lengths[i]).sum();
        assert_eq!(tpm.len(), kept.len());
        for (k, &i) in kept.iter().enumerate() {
            let want = 1e6 * (counts[i] / lengths[i]) / denom;
            assert!((tpm[k] - want).abs() <= 1e-9 * want.max(1.0));
        }
        assert!((tpm.iter().sum::<f64>() - 1e6).abs() < 1e-6);
    }
}

#[test]
fn pathway_scores_match_brute_force() {
    let table = GeneSetTable::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..10 {
        let (counts, lengths) = random_counts(&mut rng, GENE_COUNT);
        let tpm = rna_preprocess(&counts, &lengths, &[]).unwrap();
        let scores = pathway_scores(&tpm, &table).unwrap();
        assert_eq!(scores.len(), PATHWAY_COUNT);

        let n = tpm.len() as f64;
        let mut s = 0.0;
        let mut ss = 0.0;
        for x in &tpm {
            let l = (1.0 + x).ln();
            s += l;
            ss += l * l;
        }
        let mean = s / n;
        let sd = (ss / n - mean * mean).sqrt();
        for ((_, members), got) in table.sets.iter().zip(&scores) {
            let mut acc = 0.0;
            for &g in members {
                acc += ((1.0 + tpm[g]).ln() - mean) / sd;
            }
            let want = acc / members.len() as f64;
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }
}

#[test]
fn dense_caption_has_three_known_ids() {
    let v = TextVocab::standard();
    let ids = v.tokenize("dense cellularity tissue");
    assert_eq!(ids.len(), 3);
    assert!(ids.iter().all(|&i| i != UNK_ID));
    assert_eq!(v.detokenize(&ids), "dense cellularity tissue");
    assert_eq!(v.tokenize("dense glitter"), vec![v.id("dense"), UNK_ID]);
}

#[test]
fn sixteen_marker_grouping() {
    let mif = Tensor::new(&[16, 1, 1], (0..16).map(f64::from).collect()).unwrap();
    let groups = group_channels(&mif).unwrap();
    assert_eq!(groups.len(), 6);
    assert_eq!(groups[0].data(), &[0.0, 1.0, 2.0]);
    assert_eq!(groups[5].data(), &[15.0, 15.0, 15.0]);
}

#[test]
fn hematoxylin_perturbation_follows_od_decomposition() {
    let m = StainMatrix::ruifrok();
    // one hematoxylin-dominant and one eosin-dominant pixel, built from known stain amounts
    let h_px = m.to_rgb([0.8, 0.05, 0.0]);
    let e_px = m.to_rgb([0.05, 0.8, 0.0]);
    let img = Tensor::new(
        &[3, 1, 2],
        vec![h_px[0], e_px[0], h_px[1], e_px[1], h_px[2], e_px[2]],
    )
    .unwrap();
    let mut p = StainPerturbation::identity();
    p.scale[0] = 1.3;
    let out = hed_augment(&img, &p).unwrap();
    let change = |j: usize| (0..3).map(|c| (out.data()[c * 2 + j] - img.data()[c * 2 + j]).abs()).sum::<f64>();
    assert!(change(0) > 2.0 * change(1));
    let back = m.to_hed(h_px);
    assert!((back[0] - 0.8).abs() < 1e-10 && (back[1] - 0.05).abs() < 1e-10);
}

fn image_strategy() -> impl Strategy<Value = Tensor> {
    (1usize..5, 1usize..5).prop_flat_map(|(h, w)| {
        proptest::collection::vec(0.01f64..=1.0, 3 * h * w)
            .prop_map(move |d| Tensor::new(&[3, h, w], d).unwrap())
    })
}

proptest! {
    #[test]
    fn pathway_scores_ignore_count_scaling(seed in any::<u64>(), k in -8i32..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (counts, lengths) = random_counts(&mut rng, GENE_COUNT);
        prop_assume!(counts.iter().any(|&c| c > 0.0));
        let scaled: Vec<f64> = counts.iter().map(|c| c * 2f64.powi(k)).collect();
        let table = GeneSetTable::standard();
        let a = pathway_scores(&rna_preprocess(&counts, &lengths, &[]).unwrap(), &table).unwrap();
        let b = pathway_scores(&rna_preprocess(&scaled, &lengths, &[]).unwrap(), &table).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn hed_identity_is_near_identity(img in image_strategy()) {
        let out = hed_augment(&img, &StainPerturbation::identity()).unwrap();
        prop_assert!(out.max_abs_diff(&img) < 1e-6);
    }

    #[test]
    fn hed_output_stays_in_unit_range(img in image_strategy(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = StainPerturbation::random(&mut rng, 0.5, 0.5);
        let out = hed_augment(&img, &p).unwrap();
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn latent_index_map(c in 1usize..4, hb in 1usize..4, wb in 1usize..4, f in 1usize..5) {
        let (h, w) = (hb * f, wb * f);
        let img = Tensor::new(&[c, h, w], (0..c * h * w).map(|v| v as f64).collect()).unwrap();
        let z = latent_encode(&img, f).unwrap();
        prop_assert_eq!(z.shape(), &[c * f * f, hb, wb]);
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let block = (i % f) * f + j % f;
                    let zc = block * c + ch;
                    let got = z.data()[(zc * hb + i / f) * wb + j / f];
                    prop_assert_eq!(got, img.data()[(ch * h + i) * w + j]);
                }
            }
        }
        let back = latent_decode(&z, f).unwrap();
        prop_assert_eq!(back, img);
        let norm = |t: &Tensor| t.data().iter().map(|v| v * v).sum::<f64>();
        prop_assert_eq!(norm(&z).to_bits(), norm(&latent_encode(&latent_decode(&z, f).unwrap(), f).unwrap()).to_bits());
    }
}
