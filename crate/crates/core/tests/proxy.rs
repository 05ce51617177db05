//! The proxy classifier on the default synthetic dataset.

use orlc::data::{synthetic_samples, Split, SyntheticSpec};
use orlc::proxy::{eval_proxy, train_proxy, ImageSource, ProxyConfig, ProxyData};

#[test]
fn learns_the_shape_classes_from_originals() {
    let spec = SyntheticSpec::default();
    let train = synthetic_samples(spec.seed, 0..spec.n_train, Split::Train, spec.size, spec.num_classes);
    let val = synthetic_samples(
        spec.seed,
        spec.n_train..spec.n_train + spec.n_val,
        Split::Val,
        spec.size,
        spec.num_classes,
    );
    let train = ProxyData::from_samples(&train, ImageSource::Original, spec.num_classes).unwrap();
    let val = ProxyData::from_samples(&val, ImageSource::Original, spec.num_classes).unwrap();
    let model = train_proxy(&ProxyConfig::default(), &train, None).unwrap();
    let accuracy = eval_proxy(&model, &val).unwrap();
    assert!(accuracy > 0.90, "validation accuracy {accuracy}");
}
