use std::hash::{DefaultHasher, Hash, Hasher};

use rlprune::data::{generate_shapes, Dataset, ShapesSpec};
use rlprune::distill::{fit, post_train, DistillConfig, TrainConfig};
use rlprune::format::serialize;
use rlprune::{zoo, ModelGraph};

fn split(n: usize) -> Dataset {
    generate_shapes(&ShapesSpec {
        classes: 10,
        train: n,
        reward: 10,
        test: 10,
        seed: 4,
    })
    .unwrap()
    .train
}

fn fingerprint(m: &ModelGraph) -> u64 {
    let (manifest, blob) = serialize(m).unwrap();
    let mut h = DefaultHasher::new();
    manifest.hash(&mut h);
    blob.hash(&mut h);
    h.finish()
}

fn cfg(epochs: usize, tau: f64) -> DistillConfig {
    let d = DistillConfig::default();
    DistillConfig {
        tau,
        train: TrainConfig {
            epochs,
            batch_size: 8,
            seed: 5,
            ..d.train
        },
        ..d
    }
}

#[test]
fn zero_epochs_leave_the_student_alone() {
    let student = zoo::vgg_mini(10, 1);
    let teacher = zoo::vgg_mini(10, 2);
    let (out, report) = post_train(&student, &teacher, &split(32), &cfg(0, 0.75)).unwrap();
    assert_eq!(out, student);
    assert!(report.curve.is_empty() && !report.rolled_back);
}

#[test]
fn loss_falls_every_epoch_on_a_small_split() {
    let student = zoo::vgg_mini(10, 1);
    let teacher = zoo::vgg_mini(10, 2);
    let before = fingerprint(&teacher);
    let (_, report) = post_train(&student, &teacher, &split(32), &cfg(5, 0.75)).unwrap();
    assert_eq!(report.curve.len(), 5);
    assert!(report.curve.windows(2).all(|w| w[1] < w[0]), "{:?}", report.curve);
    assert_eq!(fingerprint(&teacher), before);
}

#[test]
fn tau_zero_is_plain_fine_tuning() {
    let student = zoo::res_mini(10, 1);
    let teacher = zoo::res_mini(10, 2);
    let data = split(32);
    let c = cfg(2, 0.0);
    let (kd, _) = post_train(&student, &teacher, &data, &c).unwrap();
    let mut plain = student.clone();
    fit(&mut plain, None, &data, &c.train, &mut |_, _, _| Ok(())).unwrap();
    assert_eq!(fingerprint(&kd), fingerprint(&plain));
}
