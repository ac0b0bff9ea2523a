use dsnt_core::heatmap::{pixel_to_normalized, RectifierKind};
use dsnt_core::model::{BackboneConfig, HeadKind, Model, ModelSpec};
use dsnt_core::tensor::Tensor;
use rand::SeedableRng;

fn spec(head: HeadKind, size: usize, downsample: usize) -> ModelSpec {
    ModelSpec {
        backbone: BackboneConfig {
            input_channels: 1,
            input_size: size,
            stage_widths: vec![1],
            downsample_count: downsample,
            keypoints: 1,
        },
        head,
        rectifier: RectifierKind::Softmax,
    }
}

/// One 3×3 stage with an identity kernel and a 1×1 head that scales by 100,
/// so the raw heatmap is 100× the (non-negative) input.
fn passthrough(head: HeadKind, extra: Vec<(String, Tensor)>) -> Model {
    let mut kernel = Tensor::zeros(&[1, 1, 3, 3]);
    kernel.set(&[0, 0, 1, 1], 1.0);
    let mut named = vec![
        ("conv0.weight".to_string(), kernel),
        ("conv0.bias".to_string(), Tensor::zeros(&[1])),
        ("heatmap.weight".to_string(), Tensor::full(&[1, 1, 1, 1], 100.0)),
        ("heatmap.bias".to_string(), Tensor::zeros(&[1])),
    ];
    named.extend(extra);
    Model::from_parts(spec(head, 8, 0), named).unwrap()
}

fn delta_image(row: usize, col: usize) -> Tensor {
    let mut im = Tensor::zeros(&[1, 1, 8, 8]);
    im.set(&[0, 0, row, col], 1.0);
    im
}

#[test]
fn dsnt_head_on_delta_predicts_pixel_centre() {
    let model = passthrough(HeadKind::dsnt(), vec![]);
    for (row, col) in [(0, 0), (2, 5), (7, 3)] {
        let pass = model.forward(&delta_image(row, col)).unwrap();
        let p = model.predict(&pass).unwrap()[0];
        assert!((p.x - pixel_to_normalized(col as f64, 8)).abs() < 1e-12);
        assert!((p.y - pixel_to_normalized(row as f64, 8)).abs() < 1e-12);
    }
}

#[test]
fn fc_head_with_zero_weights_ignores_position() {
    let fc = vec![
        ("fc.weight".to_string(), Tensor::zeros(&[64, 2])),
        ("fc.bias".to_string(), Tensor::from_vec(&[2], vec![0.3, -0.2]).unwrap()),
    ];
    let model = passthrough(HeadKind::fc(), fc);
    for (row, col) in [(0, 0), (2, 5), (7, 3)] {
        let pass = model.forward(&delta_image(row, col)).unwrap();
        let p = model.predict(&pass).unwrap()[0];
        assert_eq!((p.x, p.y), (0.3, -0.2));
    }
}

#[test]
fn gradients_reach_the_first_convolution() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let images = Tensor::uniform(&[2, 1, 16, 16], 0.0, 1.0, &mut rng);
    let target = Tensor::from_vec(&[2, 1, 2], vec![0.3, -0.4, -0.5, 0.1]).unwrap();
    for head in [HeadKind::hm(), HeadKind::fc(), HeadKind::dsnt(), HeadKind::dsntr()] {
        let mut s = spec(head, 16, 1);
        s.backbone.stage_widths = vec![4, 4];
        let model = Model::new(s, 1).unwrap();
        let mut pass = model.forward(&images).unwrap();
        let loss = model.loss(&mut pass, &target, &[true, true]).unwrap();
        pass.graph.backward(loss).unwrap();
        let g = pass.graph.grad(pass.params[0]);
        assert!(g.data().iter().any(|&v| v != 0.0), "{}", head.label());
    }
}

#[test]
fn heads_share_the_backbone() {
    let names = |head| Model::new(spec(head, 16, 1), 0).unwrap().param_names()[..4].to_vec();
    let hm = names(HeadKind::hm());
    for head in [HeadKind::fc(), HeadKind::dsnt(), HeadKind::dsntr()] {
        assert_eq!(names(head), hm);
    }
    let fresh = |head| Model::new(spec(head, 16, 1), 9).unwrap().params()[..4].to_vec();
    assert_eq!(fresh(HeadKind::fc()), fresh(HeadKind::dsnt()));
}
