//! Toy CNN encoder, projection head, segmentation decoder, Dice loss and
//! Adam, with hand-written backward passes.

mod checkpoint;
mod network;
pub mod ops;
mod optim;

pub use checkpoint::{Checkpoint, CheckpointHeader};
pub use network::{
    project_backward, project_forward, seg_backward, seg_forward, Encoder, EncoderTape, Gradients,
    ModelConfig, Network, Projection, ProjectionTape, SegHead, SegTape, NORM_EPS,
};
pub use optim::{adam_step, dice_loss, AdamConfig, AdamState, DICE_SMOOTH};

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig {
            in_channels: 2,
            widths: vec![2, 3, 4],
            projection_dim: 3,
        }
    }

    fn input(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
        let mut v: Vec<f64> = (0..size * size).map(|_| rng.gen()).collect();
        v.extend((0..size * size).map(|_| rng.gen_bool(0.5) as u8 as f64));
        v
    }

    #[test]
    fn zero_input_forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = Encoder::new(ModelConfig::default(), &mut rng).unwrap();
        let x = vec![0.0; 2 * 64 * 64];
        let a = enc.forward(&x, 64).unwrap();
        let b = enc.forward(&x, 64).unwrap();
        assert_eq!(a.feature, b.feature);
        assert!(a.feature.iter().all(|&f| f == 0.0));
        assert_eq!((a.feature_map.height, a.feature_map.width), (4, 4));
        assert_eq!(a.feature.len(), 64);
    }

    #[test]
    fn single_pixel_perturbation_changes_feature() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let enc = Encoder::new(ModelConfig::default(), &mut rng).unwrap();
        let mut x = input(&mut rng, 32);
        let base = enc.forward(&x, 32).unwrap().feature;
        x[5 * 32 + 17] += 0.1;
        let moved = enc.forward(&x, 32).unwrap().feature;
        assert!(base.iter().zip(&moved).any(|(a, b)| a != b));
    }

    #[test]
    fn bad_shapes_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = Encoder::new(ModelConfig::default(), &mut rng).unwrap();
        assert!(matches!(enc.forward(&vec![0.0; 2 * 24 * 24], 24), Err(crate::Error::Shape(_))));
        assert!(matches!(enc.forward(&vec![0.0; 10], 32), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn projection_is_unit_norm_and_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = ModelConfig::default();
        let proj = Projection::new(&cfg, &mut rng);
        for _ in 0..100 {
            let f: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let t = proj.forward(&f).unwrap();
            let n = t.z.iter().map(|z| z * z).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        // Scaling the final affine layer scales the pre-normalized vector.
        let f: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let z = proj.forward(&f).unwrap().z;
        let mut scaled = proj.clone();
        let hidden_len = 64 * 64 + 64;
        for p in &mut scaled.params[hidden_len..] {
            *p *= 10.0;
        }
        let z10 = scaled.forward(&f).unwrap().z;
        for (a, b) in z.iter().zip(&z10) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_projection_does_not_divide_by_zero() {
        let cfg = ModelConfig::default();
        let proj = Projection::from_params(&cfg, vec![0.0; 64 * 64 + 64 + 64 * 32 + 32]).unwrap();
        let t = proj.forward(&vec![1.0; 64]).unwrap();
        assert!(t.z.iter().all(|z| *z == 0.0));
        let mut g = vec![0.0; proj.params.len()];
        let gf = proj.backward(&t, &vec![1.0; 32], &mut g);
        assert!(gf.iter().chain(&g).all(|v| v.is_finite()));
    }

    #[test]
    fn segmentation_output_shape_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Network::pretraining(ModelConfig::default(), &mut rng)
            .unwrap()
            .into_segmentation(&mut rng);
        let x = input(&mut rng, 32);
        let prob = net.segment(&x, 32).unwrap();
        assert_eq!(prob.len(), 32 * 32);
        assert!(prob.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn projection_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = Network::pretraining(small(), &mut rng).unwrap();
        let x = input(&mut rng, 8);
        let c: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (enc, proj) = project_forward(&net, &x, 8).unwrap();
        let mut grads = Gradients::zeros(&net);
        project_backward(&net, &enc, &proj, &c, &mut grads);
        let objective = |n: &Network| -> f64 {
            let z = n.embed(&x, 8).unwrap();
            z.iter().zip(&c).map(|(a, b)| a * b).sum()
        };
        let h = 1e-5;
        for i in 0..grads.projection.len() {
            let p = &mut net.projection.as_mut().unwrap().params;
            let orig = p[i];
            p[i] = orig + h;
            let up = objective(&net);
            net.projection.as_mut().unwrap().params[i] = orig - h;
            let dn = objective(&net);
            net.projection.as_mut().unwrap().params[i] = orig;
            let fd = (up - dn) / (2.0 * h);
            assert!(rel_err(fd, grads.projection[i]) < 1e-5, "proj {i}: {fd} vs {}", grads.projection[i]);
        }
        for i in 0..grads.encoder.len() {
            let orig = net.encoder.params[i];
            net.encoder.params[i] = orig + h;
            let up = objective(&net);
            net.encoder.params[i] = orig - h;
            let dn = objective(&net);
            net.encoder.params[i] = orig;
            let fd = (up - dn) / (2.0 * h);
            assert!(rel_err(fd, grads.encoder[i]) < 1e-5, "enc {i}: {fd} vs {}", grads.encoder[i]);
        }
    }

    #[test]
    fn seg_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = Network::pretraining(small(), &mut rng)
            .unwrap()
            .into_segmentation(&mut rng);
        let x = input(&mut rng, 8);
        let gt: Vec<u8> = (0..64).map(|_| rng.gen_bool(0.4) as u8).collect();
        let (enc, seg) = seg_forward(&net, &x, 8).unwrap();
        let (_, gp) = dice_loss(&seg.prob, &gt).unwrap();
        let mut grads = Gradients::zeros(&net);
        seg_backward(&net, &enc, &seg, &gp, &mut grads);
        let objective = |n: &Network| dice_loss(&n.segment(&x, 8).unwrap(), &gt).unwrap().0;
        let h = 1e-5;
        for i in 0..grads.seg_head.len() {
            let orig = net.seg_head.as_ref().unwrap().params[i];
            net.seg_head.as_mut().unwrap().params[i] = orig + h;
            let up = objective(&net);
            net.seg_head.as_mut().unwrap().params[i] = orig - h;
            let dn = objective(&net);
            net.seg_head.as_mut().unwrap().params[i] = orig;
            let fd = (up - dn) / (2.0 * h);
            assert!(rel_err(fd, grads.seg_head[i]) < 1e-5, "head {i}: {fd} vs {}", grads.seg_head[i]);
        }
        for i in 0..grads.encoder.len() {
            let orig = net.encoder.params[i];
            net.encoder.params[i] = orig + h;
            let up = objective(&net);
            net.encoder.params[i] = orig - h;
            let dn = objective(&net);
            net.encoder.params[i] = orig;
            let fd = (up - dn) / (2.0 * h);
            assert!(rel_err(fd, grads.encoder[i]) < 1e-5, "enc {i}: {fd} vs {}", grads.encoder[i]);
        }
    }
}
