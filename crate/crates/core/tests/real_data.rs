mod common;

use rfad::data::{data_root, load_named, DatasetName, Preprocessing, Split};
use rfad::kernel::{gram, random_feature_map};
use rfad::networks::NetworkSpec;
use rfad::{Ensemble64, Real};

#[test]
fn shipped_subsets_have_expected_shapes() {
    for (name, train_n, test_n) in [
        (DatasetName::Mnist, 8000, 2000),
        (DatasetName::FashionMnist, 20000, 5000),
    ] {
        let train = load_named::<Real>(&data_root(), name, Split::Train).unwrap();
        let test = load_named::<Real>(&data_root(), name, Split::Test).unwrap();
        assert_eq!(train.images.shape(), &[train_n, 1, 28, 28]);
        assert_eq!(test.images.shape(), &[test_n, 1, 28, 28]);
        assert_eq!(train.num_classes, 10);
        assert!(train.class_indices().iter().all(|c| !c.is_empty()));
        assert!(train.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn first_mnist_labels_match_the_shipped_files() {
    let train = load_named::<Real>(&data_root(), DatasetName::Mnist, Split::Train).unwrap();
    assert_eq!(&train.labels[..6], &[1, 7, 4, 6, 3, 6]);
}

#[test]
fn ingestion_hash_is_stable() {
    let a = load_named::<Real>(&data_root(), DatasetName::Mnist, Split::Test).unwrap();
    let b = load_named::<Real>(&data_root(), DatasetName::Mnist, Split::Test).unwrap();
    assert_eq!(a.content_hash(), b.content_hash());
    assert_eq!(a.images, b.images);
}

#[test]
fn test_split_uses_training_statistics() {
    let raw = load_named::<f64>(&data_root(), DatasetName::Mnist, Split::Test).unwrap();
    let (train, test) = common::load(DatasetName::Mnist).unwrap();
    let Preprocessing::Standardize(s) = test.preprocessing else {
        panic!("expected standardization");
    };
    assert_eq!(train.preprocessing, test.preprocessing);
    let n = train.images.len() as f64;
    let mean = train.images.data().iter().map(|v| *v as f64).sum::<f64>() / n;
    assert!(mean.abs() < 1e-4);
    for (p, r) in test.images.data().iter().zip(raw.images.data()).step_by(997) {
        assert!((*p as f64 - (r - s.mean) / s.std).abs() < 1e-5);
    }
    let test_mean = test.images.data().iter().map(|v| *v as f64).sum::<f64>() / test.images.len() as f64;
    assert!(test_mean.abs() > 1e-4, "test split was standardized with its own mean");
}

#[test]
fn gram_of_mnist_digits_is_symmetric_psd() {
    let (train, _) = common::load(DatasetName::Mnist).unwrap();
    let x = common::to_f64(&common::head(&train, 8));
    let spec = NetworkSpec::convnet3(16, x.input_shape());
    let ens = Ensemble64::sample(&spec, 2, 3).unwrap();
    let phi = random_feature_map(&ens, &x.images).unwrap();
    let k = gram(&phi, &phi).unwrap();
    let m = nalgebra::DMatrix::from_fn(8, 8, |i, j| k.get2(i, j));
    assert_eq!(m, m.transpose());
    let eig = m.symmetric_eigen().eigenvalues;
    let scale = eig.amax();
    assert!(eig.iter().all(|e| *e > -1e-10 * scale), "{eig}");
}
