use super::*;
use crate::rng::stream;
use crate::synthcorpus::FeatureMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

fn tiny_arch(vocab: usize, attention: bool) -> ArchConfig {
    ArchConfig {
        feature_dim: 3,
        encoder_dim: 4,
        label_dim: 3,
        joiner_dim: 5,
        vocab_size: vocab,
        downsample_factor: 2,
        use_attention: attention,
    }
}

fn random_features(frames: usize, dim: usize, seed: u64) -> FeatureMatrix {
    let mut rng = stream(seed, "feat", 0);
    let data = (0..frames * dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    FeatureMatrix::new(frames, dim, data).unwrap()
}

#[test]
fn init_is_deterministic_with_zero_biases() {
    let arch = ArchConfig::with_vocab(7);
    let a = init_model(arch, 3).unwrap();
    let b = init_model(arch, 3).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, init_model(arch, 4).unwrap());
    for p in Param::ALL.into_iter().filter(|p| p.is_bias()) {
        assert!(a.block(p).iter().all(|&v| v == 0.0), "{}", p.name());
    }
}

#[test]
fn init_variance_matches_uniform_law() {
    let arch = ArchConfig::with_vocab(40);
    let m = init_model(arch, 1).unwrap();
    for p in Param::ALL.into_iter().filter(|p| !p.is_bias()) {
        let w = m.block(p);
        if w.len() < 256 {
            continue;
        }
        let (_, fan_in) = p.geometry(&arch);
        let s2 = 1.0 / fan_in as f64;
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64;
        let expected = s2 / 3.0;
        assert!((var / expected - 1.0).abs() < 0.2, "{}: {var} vs {expected}", p.name());
        let s = s2.sqrt();
        assert!(w.iter().all(|v| v.abs() < s));
    }
}

#[test]
fn invalid_arch_is_rejected() {
    let mut arch = ArchConfig::with_vocab(3);
    arch.joiner_dim = 0;
    assert!(init_model(arch, 0).is_err());
    arch = ArchConfig::with_vocab(0);
    assert!(init_model(arch, 0).is_err());
}

#[test]
fn zero_model_gives_zero_lattice() {
    let arch = tiny_arch(4, true);
    let m = Model::zeros(arch).unwrap();
    let lat = m.forward(&random_features(7, 3, 0), &[1, 2]).unwrap();
    assert_eq!(lat.frames(), 4);
    assert_eq!(lat.label_len(), 2);
    assert!(lat.data().iter().all(|&z| z == 0.0));
}

#[test]
fn empty_label_sequence_shape() {
    let m = init_model(tiny_arch(4, false), 0).unwrap();
    let lat = m.forward(&random_features(5, 3, 0), &[]).unwrap();
    // T' = 3, U + 1 = 1, V + 1 = 5.
    assert_eq!(lat.data().len(), 15);
}

#[test]
fn bad_labels_are_model_errors() {
    let m = init_model(tiny_arch(4, false), 0).unwrap();
    let feats = random_features(5, 3, 0);
    assert!(matches!(m.forward(&feats, &[0]), Err(Error::Model(_))));
    assert!(matches!(m.forward(&feats, &[5]), Err(Error::Model(_))));
    assert!(m.forward(&feats, &[4]).is_ok());
    assert!(matches!(m.forward(&random_features(5, 2, 0), &[1]), Err(Error::Model(_))));
}

#[test]
fn incremental_decoding_api_matches_lattice() {
    let m = init_model(tiny_arch(4, true), 5).unwrap();
    let feats = random_features(6, 3, 1);
    let labels = [3, 1, 4];
    let lat = m.forward(&feats, &labels).unwrap();
    let enc = m.encode(&feats).unwrap();
    let mut state = m.start_state();
    for u in 0..=labels.len() {
        for t in 0..enc.frames {
            let z = m.joint_logits(&enc, t, &state);
            for (a, b) in z.iter().zip(lat.cell(t, u)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        if u < labels.len() {
            state = m.label_step(&state, labels[u]);
        }
    }
}

#[test]
fn single_cell_loss_is_blank_log_softmax() {
    let z = vec![0.3, -1.0, 2.0];
    let lat = LogitLattice::new(1, 0, 2, z.clone()).unwrap();
    let (nll, grad) = transducer_loss(&lat, &[]).unwrap();
    let log_z = z.iter().map(|v: &f64| v.exp()).sum::<f64>().ln();
    assert!((nll - (log_z - z[0])).abs() < 1e-14);
    assert!(grad.iter().sum::<f64>().abs() < 1e-14);
}

#[test]
fn uniform_two_frame_one_label_closed_form() {
    for v in 1..=4usize {
        let lat = LogitLattice::new(2, 1, v, vec![0.0; 2 * 2 * (v + 1)]).unwrap();
        let (nll, _) = transducer_loss(&lat, &[1]).unwrap();
        let c = (v + 1) as f64;
        assert!((nll + (2.0 / c.powi(3)).ln()).abs() < 1e-12);
    }
}

#[test]
fn zero_frame_lattice_is_a_loss_error() {
    let lat = LogitLattice::new(0, 0, 2, vec![]).unwrap();
    assert!(matches!(transducer_loss(&lat, &[]), Err(Error::Loss(_))));
    let lat = LogitLattice::new(1, 1, 2, vec![0.0; 6]).unwrap();
    assert!(transducer_loss(&lat, &[1, 2]).is_err());
    assert!(transducer_loss(&lat, &[0]).is_err());
}

#[test]
fn zero_lattice_gradient_gives_zero_parameter_gradient() {
    let m = init_model(tiny_arch(3, true), 2).unwrap();
    let cache = m.forward_cached(&random_features(6, 3, 2), &[1, 2]).unwrap();
    let g = m.backward(&cache, &vec![0.0; cache.lattice.data().len()]);
    assert!(g.iter().all(|&v| v == 0.0));
}

#[test]
fn unused_attention_has_exactly_zero_gradient() {
    let m = init_model(tiny_arch(3, false), 2).unwrap();
    let (_, g) = m.loss_and_gradient(&random_features(6, 3, 2), &[1, 2]).unwrap();
    for p in [Param::AttnQ, Param::AttnK, Param::AttnV] {
        assert!(g[m.layout().range(p)].iter().all(|&v| v == 0.0));
    }
    // Embedding rows of labels that never occur are untouched as well.
    let h = m.arch().label_dim;
    let embed = &g[m.layout().range(Param::Embed)];
    assert!(embed[3 * h..4 * h].iter().all(|&v| v == 0.0));
}

fn central_difference(m: &Model, feats: &FeatureMatrix, labels: &[u32], i: usize, step: f64) -> f64 {
    let mut plus = m.clone();
    plus.params_mut()[i] += step;
    let mut minus = m.clone();
    minus.params_mut()[i] -= step;
    let f = |m: &Model| transducer_loss(&m.forward(feats, labels).unwrap(), labels).unwrap().0;
    (f(&plus) - f(&minus)) / (2.0 * step)
}

#[test]
fn tiny_model_gradient_matches_finite_differences() {
    for attention in [false, true] {
        let m = init_model(tiny_arch(3, attention), 7).unwrap();
        let feats = random_features(7, 3, 9);
        let labels = [2, 1, 3];
        let (_, g) = m.loss_and_gradient(&feats, &labels).unwrap();
        for (i, &gi) in g.iter().enumerate() {
            let fd = central_difference(&m, &feats, &labels, i, 1e-5);
            let scale = gi.abs().max(fd.abs());
            if scale > 1e-6 {
                assert!((gi - fd).abs() / scale < 1e-4, "param {i}: {gi} vs {fd}");
            }
        }
    }
}

#[test]
fn warm_start_full_is_a_copy() {
    let prior = init_model(ArchConfig::with_vocab(9), 1).unwrap();
    let copy = warm_start(&prior, 9, WarmStartMode::Full, 99).unwrap();
    assert_eq!(copy, prior);
    assert!(matches!(
        warm_start(&prior, 10, WarmStartMode::Full, 0),
        Err(Error::WarmStart(_))
    ));
}

#[test]
fn warm_start_encoder_only_reinitializes_label_and_joiner() {
    let prior = init_model(ArchConfig::with_vocab(9), 1).unwrap();
    for new_v in [9, 5, 20] {
        let m = warm_start(&prior, new_v, WarmStartMode::EncoderOnly, 42).unwrap();
        assert_eq!(m.arch().vocab_size, new_v);
        let enc_a: Vec<u64> = m.group_params(Group::Encoder).iter().map(|v| v.to_bits()).collect();
        let enc_b: Vec<u64> = prior.group_params(Group::Encoder).iter().map(|v| v.to_bits()).collect();
        assert_eq!(enc_a, enc_b);
        assert_eq!(m.block(Param::JoinWo).len(), (new_v + 1) * m.arch().joiner_dim);
        assert_eq!(m.block(Param::Embed).len(), (new_v + 1) * m.arch().label_dim);
        let fresh = init_model(*m.arch(), 42).unwrap();
        for g in [Group::Label, Group::Joiner] {
            assert_eq!(m.group_params(g), fresh.group_params(g));
        }
        if new_v == 9 {
            assert_ne!(m.group_params(Group::Label), prior.group_params(Group::Label));
            assert_ne!(m.group_params(Group::Joiner), prior.group_params(Group::Joiner));
        }
    }
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let mut arch = ArchConfig::with_vocab(6);
    arch.use_attention = true;
    let m = init_model(arch, 8).unwrap();
    let bytes = save_checkpoint(&m);
    assert_eq!(&bytes[..7], b"TDCKPT1");
    let back = load_checkpoint(&bytes).unwrap();
    let bits = |m: &Model| m.params().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back), bits(&m));
    assert_eq!(back.arch(), m.arch());

    let mut corrupt = bytes.clone();
    corrupt[40] ^= 1;
    assert!(matches!(load_checkpoint(&corrupt), Err(Error::Checkpoint(_))));
    assert!(load_checkpoint(&bytes[..bytes.len() - 1]).is_err());
    assert!(load_checkpoint(b"garbage").is_err());
}
