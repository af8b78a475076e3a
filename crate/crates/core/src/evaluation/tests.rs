use super::*;
use crate::network::ModelConfig;
use crate::training::{make_synthetic, SyntheticSpec};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn tmp_dir(tag: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("hagcn-eval-{tag}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&d);
    fs::create_dir_all(&d).unwrap();
    d
}

fn small_model() -> Model {
    let cfg = ModelConfig {
        num_classes: 8,
        channels: vec![8, 8],
        strides: vec![1, 2],
        ..ModelConfig::ntu()
    };
    Model::new(cfg, 2).unwrap()
}

fn small_set() -> (Vec<SkeletonSequence>, DataConfig) {
    let spec = SyntheticSpec {
        samples_per_class: 2,
        frames: 8,
        ..SyntheticSpec::default()
    };
    (
        make_synthetic(&spec).unwrap(),
        DataConfig {
            frames: 8,
            persons: 1,
            ..DataConfig::default()
        },
    )
}

#[test]
fn topk_examples() {
    let s = t(&[2, 3], &[0.7, 0.2, 0.1, 0.1, 0.3, 0.6]);
    assert_eq!(topk_accuracy(&s, &[0, 2], 1).unwrap(), 1.0);
    assert_eq!(topk_accuracy(&s, &[1, 1], 1).unwrap(), 0.0);
    assert_eq!(topk_accuracy(&s, &[1, 1], 2).unwrap(), 1.0);
    assert_eq!(topk_accuracy(&s, &[2, 0], 3).unwrap(), 1.0);
    assert_eq!(topk_accuracy(&s, &[0, 0], 1).unwrap(), 0.5);
}

#[test]
fn topk_ties_rank_lower_index_first() {
    let s = t(&[1, 3], &[0.4, 0.4, 0.2]);
    assert_eq!(topk_accuracy(&s, &[0], 1).unwrap(), 1.0);
    assert_eq!(topk_accuracy(&s, &[1], 1).unwrap(), 0.0);
}

#[test]
fn topk_rejects_bad_input() {
    let s = t(&[1, 2], &[0.5, 0.5]);
    assert!(topk_accuracy(&s, &[0, 1], 1).is_err());
    assert!(topk_accuracy(&s, &[2], 1).is_err());
    assert!(topk_accuracy(&s, &[0], 0).is_err());
}

#[test]
fn improvement_ratio_examples() {
    let r = improvement_ratio(0.80, 0.70, 0.75, 0.60).unwrap();
    assert!((r - 2.0 / 3.0).abs() < 1e-12);
    assert!((improvement_ratio(0.5, 0.4, 0.6, 0.5).unwrap() - 1.0).abs() < 1e-12);
    let neg = improvement_ratio(0.4, 0.5, 0.6, 0.5).unwrap();
    assert!((neg + 1.0).abs() < 1e-12);
    assert!(matches!(
        improvement_ratio(0.5, 0.4, 0.6, 0.6),
        Err(Error::UndefinedRatio)
    ));
}

#[test]
fn fusion_examples() {
    let a = t(&[2, 2], &[0.9, 0.1, 0.4, 0.6]);
    let b = t(&[2, 2], &[0.2, 0.8, 0.3, 0.7]);
    assert_eq!(fuse_streams(std::slice::from_ref(&a), None).unwrap(), a);
    assert_eq!(
        fuse_streams(&[a.clone(), b.clone()], Some(&[1.0, 0.0])).unwrap(),
        a
    );
    let f = fuse_streams(&[a.clone(), b.clone()], None).unwrap();
    assert!(f.max_abs_diff(&t(&[2, 2], &[1.1, 0.9, 0.7, 1.3])) < 1e-15);
    assert!(fuse_streams(&[a.clone(), t(&[1, 2], &[0.0, 1.0])], None).is_err());
    assert!(fuse_streams(&[a], Some(&[1.0, 1.0])).is_err());
    assert!(fuse_streams(&[], None).is_err());
}

#[test]
fn score_csv_round_trip() {
    let dir = tmp_dir("scores");
    let path = dir.join("s.csv");
    let s = t(&[2, 3], &[0.1, 0.2, 0.7, 1.0 / 3.0, 1e-17, 0.5]);
    write_scores_csv(&path, &s, &[2, 0]).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("label,class_0,class_1,class_2\n"));
    let (back, labels) = read_scores_csv(&path).unwrap();
    assert_eq!(back, s);
    assert_eq!(labels, [2, 0]);
    fs::write(&path, "label,class_0\n0,abc\n").unwrap();
    assert!(read_scores_csv(&path).is_err());
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn matrix_files_round_trip() {
    let dir = tmp_dir("matrix");
    let m = t(&[2, 3], &[0.25, -1.5, 1.0 / 7.0, 0.0, 3.0, -0.125]);
    let csv = dir.join("m.csv");
    write_matrix_csv(&csv, &m).unwrap();
    assert!(read_matrix_csv(&csv).unwrap().max_abs_diff(&m) < 1e-6);
    let pgm = dir.join("m.pgm");
    write_pgm(&pgm, &m).unwrap();
    let (h, w, px) = read_pgm(&pgm).unwrap();
    assert_eq!((h, w), (2, 3));
    assert_eq!(px, [99, 0, 93, 85, 255, 78]);
    write_pgm(&pgm, &Tensor::full(&[2, 2], 0.3)).unwrap();
    assert_eq!(read_pgm(&pgm).unwrap().2, [0; 4]);
    fs::write(&pgm, b"P2\n1 1\n255\n\x00").unwrap();
    assert!(read_pgm(&pgm).is_err());
    fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn channel_mean_uses_first_sample() {
    let m = t(&[2, 2, 1, 1], &[1.0, 3.0, 10.0, 20.0]);
    assert_eq!(channel_mean(&m).unwrap().data(), &[2.0]);
    assert!(channel_mean(&t(&[2, 2], &[0.0; 4])).is_err());
}

#[test]
fn evaluation_is_deterministic_and_batch_independent() {
    let model = small_model();
    let (set, data) = small_set();
    let (r1, s1) = evaluate(&model, &set, &data, 4).unwrap();
    let (r2, s2) = evaluate(&model, &set, &data, 16).unwrap();
    assert_eq!(s1.shape(), &[16, 8]);
    assert!(s1.max_abs_diff(&s2) < 1e-12);
    assert_eq!(r1.top1, r2.top1);
    let (_, s3) = evaluate(&model, &set, &data, 4).unwrap();
    assert_eq!(s1, s3);
    for row in s1.data().chunks(8) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn ablation_report_is_consistent() {
    let model = small_model();
    let (set, data) = small_set();
    let report = ablation_eval(&model, &set, &data, 8).unwrap();
    let ab = report.ablation.as_ref().unwrap();
    assert_eq!(ab.full, report.top1);
    assert_eq!(report.samples, 16);
    let without_ra = predict_dataset(&model, &set, &data, 8, Some(Branch::Ra)).unwrap();
    assert_eq!(
        topk_accuracy(&without_ra, &labels_of(&set), 1).unwrap(),
        ab.without_ra
    );
    // α starts at 0, so the relational-attention branch contributes nothing yet.
    assert_eq!(ab.changed_without_ra, 0);
    let json = report.to_json().unwrap();
    assert!(json.contains("\"without_rd\""));
}

#[test]
fn mask_export_writes_all_kinds() {
    let model = small_model();
    let (set, data) = small_set();
    let seqs: Vec<&SkeletonSequence> = set.iter().take(2).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = assemble_batch(
        &seqs,
        data.stream,
        model.graph(),
        8,
        1,
        Augment::None,
        &mut rng,
    )
    .unwrap();
    let dir = tmp_dir("masks");
    let out = export_masks(&model, &batch.input, 1, Subset::Inward, &dir).unwrap();
    let kinds: Vec<&str> = out.iter().map(|m| m.kind).collect();
    assert_eq!(kinds, ["rd", "ra", "hybrid", "final"]);
    for m in &out {
        assert_eq!(m.matrix.shape(), &[25, 25]);
        assert_eq!(
            m.csv.file_name().unwrap().to_str().unwrap(),
            format!("layer1_inward_{}.csv", m.kind)
        );
        assert!(read_matrix_csv(&m.csv).unwrap().max_abs_diff(&m.matrix) < 1e-6);
        assert_eq!(read_pgm(&m.pgm).unwrap().0, 25);
    }
    assert_eq!(out[0].matrix, out[2].matrix);
    assert!(export_masks(&model, &batch.input, 2, Subset::Inward, &dir).is_err());
    fs::remove_dir_all(&dir).unwrap();
}
