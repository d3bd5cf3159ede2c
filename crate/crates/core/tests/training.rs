mod common;

use candle_core::{DType, Device};
use candle_nn::{VarBuilder, VarMap};
use candle_transformers::models::clip::text_model::Activation;
use candle_transformers::models::clip::vision_model::{ClipVisionConfig, ClipVisionTransformer};
use common::{task_curve, toy_images, toy_split as split_of, train_toy as run, TOY_SEED};
use skinfair::features::{load_backbone, BackboneFamily, BackboneSpec};
use skinfair::ingest::{preprocess_rgb, PreprocessSpec, Normalization};
use skinfair::metrics::ToneGrouping;
use skinfair::models::{DebiasNet, ModelConfig, NetInput, Variant};
use skinfair::train::{evaluate, predict, train, Checkpoint, TrainConfig};

const SEED: u64 = TOY_SEED;

#[test]
fn training_is_deterministic() {
    let toy = toy_images(6, 16, 1);
    let (_, a, ma) = run(ModelConfig::new(Variant::Tabe), 2, &toy);
    let (_, b, mb) = run(ModelConfig::new(Variant::Tabe), 2, &toy);
    assert_eq!(task_curve(&ma), task_curve(&mb));
    assert_eq!(a.weights_checksum().unwrap(), b.weights_checksum().unwrap());
    assert_eq!(ma.dataset_checksum, mb.dataset_checksum);
}

#[test]
fn zero_debias_weights_follow_the_baseline() {
    let toy = toy_images(6, 16, 2);
    let (_, _, base) = run(ModelConfig::new(Variant::Baseline), 3, &toy);
    let reference = task_curve(&base);
    assert_eq!(reference.len(), base.history.len() * base.history[0].task_losses.len());
    for v in [Variant::Tabe, Variant::FairDisco, Variant::Vae] {
        let (_, _, m) = run(ModelConfig::new(v).with_debias_weights_zeroed(), 3, &toy);
        let curve = task_curve(&m);
        assert_eq!(curve.len(), reference.len(), "{v}");
        let worst = curve.iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst <= 1e-6, "{v}: task losses differ by {worst}");
    }
}

#[test]
fn reloaded_checkpoint_evaluates_identically() {
    let toy = toy_images(6, 16, 3);
    let (net, ckpt, manifest) = run(ModelConfig::new(Variant::FairDisco), 2, &toy);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("checkpoint.safetensors");
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path, &Device::Cpu).unwrap();
    assert_eq!(loaded.meta.epoch, manifest.selected_epoch);
    let test = split_of(&toy).test;
    let live = predict(&net, &toy.data, &test, 0, ToneGrouping::Fine, 0.5).unwrap();
    let again = evaluate(&loaded, &toy.data, &test, 0, ToneGrouping::Fine, 0.5, &Device::Cpu).unwrap();
    assert_eq!(live.len(), test.len());
    assert_eq!(live, again);
    let bits = |r: &[skinfair::metrics::PredictionRecord]| -> Vec<u64> {
        r.iter().flat_map(|p| p.scores.iter().map(|s| s.to_bits())).collect()
    };
    assert_eq!(bits(&live), bits(&again));
}

fn tiny_clip(path: &std::path::Path) {
    let vm = VarMap::new();
    let vb = VarBuilder::from_varmap(&vm, DType::F32, &Device::Cpu);
    let cfg = ClipVisionConfig {
        embed_dim: 32,
        activation: Activation::QuickGelu,
        intermediate_size: 64,
        num_hidden_layers: 1,
        num_attention_heads: 2,
        projection_dim: 16,
        num_channels: 3,
        image_size: 16,
        patch_size: 8,
    };
    // Real checkpoints carry the class token; a VarMap build would otherwise skip it.
    vb.pp("vision_model.embeddings").get(32, "class_embedding").unwrap();
    ClipVisionTransformer::new(vb.pp("vision_model"), &cfg).unwrap();
    candle_nn::linear_no_bias(32, 16, vb.pp("visual_projection")).unwrap();
    vm.save(path).unwrap();
}

#[test]
fn frozen_clip_backbone_is_untouched_by_training() {
    let dir = tempfile::tempdir().unwrap();
    let weights = dir.path().join("clip.safetensors");
    tiny_clip(&weights);
    let mut spec = BackboneSpec::new(BackboneFamily::DermClip, Some(weights.display().to_string()), 16);
    spec.input_size = 16;
    spec.clip_heads = Some(2);
    let dev = Device::Cpu;
    let backbone = load_backbone(&spec, SEED, &dev).unwrap();
    assert!(!backbone.is_trainable());
    assert!(backbone.params().is_empty());
    let before = candle_core::safetensors::load(&weights, &dev).unwrap();

    let toy = toy_images(4, 16, 4);
    let model = ModelConfig::new(Variant::Baseline);
    let checksum = backbone.checksum().to_string();
    let net = DebiasNet::new(model.clone(), NetInput::Images(backbone), SEED, &dev).unwrap();
    let trained: std::collections::BTreeSet<String> = net.all_params().into_iter().map(|(n, _)| n).collect();
    assert!(trained.iter().all(|n| !n.starts_with("backbone")), "{trained:?}");
    let mut cfg = TrainConfig::new(model, spec.clone(), SEED);
    cfg.hyper.epochs = 1;
    cfg.hyper.batch_size = 8;
    train(&cfg, &net, &checksum, &toy.data, &split_of(&toy), 0).unwrap();

    // The embeddings of a fixed image are unchanged after training, and the
    // file on disk was never rewritten.
    let reloaded = load_backbone(&spec, SEED, &dev).unwrap();
    let pre = PreprocessSpec {
        target_size: 16,
        normalization: Normalization::CLIP,
        ..PreprocessSpec::training(Normalization::CLIP)
    }
    .for_eval();
    let img = preprocess_rgb(&image::RgbImage::from_pixel(16, 16, image::Rgb([120, 80, 60])), &pre, 0);
    let x = skinfair::features::pixels_to_tensor(&[img], &dev).unwrap();
    let a: Vec<f32> = net.backbone().unwrap().forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    let b: Vec<f32> = reloaded.forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    let after = candle_core::safetensors::load(&weights, &dev).unwrap();
    for (name, t) in &before {
        let x: Vec<f32> = t.flatten_all().unwrap().to_vec1().unwrap();
        let y: Vec<f32> = after[name].flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(x, y, "{name}");
    }
}

#[test]
fn generic_cnn_embedding_width_comes_from_the_weights() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("resnet152.safetensors");
    {
        let vm = VarMap::new();
        let vb = VarBuilder::from_varmap(&vm, DType::F32, &Device::Cpu);
        candle_transformers::models::resnet::resnet152_no_final_layer(vb).unwrap();
        vm.save(&path).unwrap();
    }
    let mut spec = BackboneSpec::new(BackboneFamily::GenericCnn, Some(path.display().to_string()), 2048);
    spec.input_size = 64;
    let b = load_backbone(&spec, 0, &Device::Cpu).unwrap();
    assert_eq!(b.embedding_dim(), 2048);
    let x = candle_core::Tensor::zeros((2, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
    assert_eq!(b.forward(&x).unwrap().dims(), &[2, 2048]);

    spec.embedding_dim = 512;
    assert!(load_backbone(&spec, 0, &Device::Cpu).is_err());
}
