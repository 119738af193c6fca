//! Binary model container: a JSON manifest describing the architecture
//! followed by raw 32-bit little-endian weight arrays, and an embedded
//! hidden-state store when the model runs off precomputed embeddings.
//!
//! Weight values are stored exactly, so a loaded model reproduces the
//! saved model's eval-mode outputs bit for bit. Tree ensembles ride along
//! inside the manifest; their thresholds and leaf values are kept as
//! 64-bit values for the same reason.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::Tensor;
use crate::encoder::{EmbeddingStore, EncoderBackend, EncoderConfig, EncoderParams, OffsetReader};
use crate::error::{Error, Result};
use crate::forests::{Boosted, Forest};
use crate::heads::{LinearHead, ResidualHead};
use crate::labels::{Label, PerLabel};
use crate::model::{Arch, GuardModel, HeadKind, Pooling};
use crate::pooling::AttnPoolParams;

pub const MODEL_MAGIC: &[u8; 6] = b"JGRD1\n";
pub const FORMAT_VERSION: u32 = 1;

/// Hard ceiling on the manifest section so a corrupt length field cannot
/// trigger a giant allocation.
const MAX_MANIFEST_BYTES: u64 = 64 << 20;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    arch: String,
    labels: Vec<String>,
    thresholds: Vec<f64>,
    encoder: Option<EncoderConfig>,
    precomputed: bool,
    pooling: StoredPooling,
    heads: StoredHeads,
    arrays: Vec<ArrayEntry>,
    ensembles: Vec<EnsembleEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct StoredPooling {
    kind: String,
    dropout: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct StoredHeads {
    kind: String,
    blocks: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EnsembleEntry {
    label: String,
    model: EnsembleModel,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum EnsembleModel {
    Forest(Forest),
    Boosted(Boosted),
}

fn pooling_spec(p: &Pooling<f32>) -> StoredPooling {
    match p {
        Pooling::Mean => StoredPooling { kind: "mean".into(), dropout: 0.0 },
        Pooling::Cls => StoredPooling { kind: "cls".into(), dropout: 0.0 },
        Pooling::Attn(a) => StoredPooling { kind: "attn".into(), dropout: a.dropout },
        Pooling::PerLabelAttn(a) => {
            StoredPooling { kind: "per_label_attn".into(), dropout: a.jailbreak.dropout }
        }
    }
}

fn head_spec(h: &HeadKind<f32>) -> Result<(StoredHeads, Vec<EnsembleEntry>)> {
    let require = |label: Label, fitted: bool| {
        if fitted {
            Ok(())
        } else {
            Err(Error::state(format!("{label} ensemble is not fitted; fit it before saving")))
        }
    };
    Ok(match h {
        HeadKind::Linear(_) => (StoredHeads { kind: "linear".into(), blocks: 0 }, Vec::new()),
        HeadKind::Residual(r) => (
            StoredHeads { kind: "residual".into(), blocks: r.jailbreak.blocks.len() },
            Vec::new(),
        ),
        HeadKind::Forest(f) => {
            let mut entries = Vec::new();
            for (label, head) in f.iter() {
                require(label, head.is_some())?;
                entries.push(EnsembleEntry {
                    label: label.name().into(),
                    model: EnsembleModel::Forest(head.clone().unwrap()),
                });
            }
            (StoredHeads { kind: "forest".into(), blocks: 0 }, entries)
        }
        HeadKind::Boosted(b) => {
            let mut entries = Vec::new();
            for (label, head) in b.iter() {
                require(label, head.is_some())?;
                entries.push(EnsembleEntry {
                    label: label.name().into(),
                    model: EnsembleModel::Boosted(head.clone().unwrap()),
                });
            }
            (StoredHeads { kind: "boosted".into(), blocks: 0 }, entries)
        }
    })
}

fn build_manifest(model: &GuardModel<f32>) -> Result<Manifest> {
    let (encoder, precomputed) = match &model.backend {
        EncoderBackend::Learned { config, .. } => (Some(config.clone()), false),
        EncoderBackend::Precomputed(_) => (None, true),
    };
    let (heads, ensembles) = head_spec(&model.heads)?;
    let arrays = model
        .named_params()
        .into_iter()
        .map(|(name, t)| ArrayEntry { name, shape: t.shape().to_vec() })
        .collect();
    Ok(Manifest {
        format_version: FORMAT_VERSION,
        arch: model.arch.name().into(),
        labels: Label::ALL.iter().map(|l| l.name().into()).collect(),
        thresholds: Label::ALL.iter().map(|l| *model.thresholds.get(*l)).collect(),
        encoder,
        precomputed,
        pooling: pooling_spec(&model.pooling),
        heads,
        arrays,
        ensembles,
    })
}

pub fn write_model(model: &GuardModel<f32>, w: &mut impl Write) -> Result<()> {
    let manifest = build_manifest(model)?;
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::state(e.to_string()))?;
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, t) in model.named_params() {
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    if let EncoderBackend::Precomputed(store) = &model.backend {
        store.write_to(w)?;
    }
    Ok(())
}

pub fn save_model(model: &GuardModel<f32>, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)
        .map_err(|e| Error::Data(format!("cannot create {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    write_model(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<GuardModel<f32>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut r = OffsetReader::new(BufReader::new(file));
    read_model(&mut r)
}

pub fn read_model(r: &mut OffsetReader<impl Read>) -> Result<GuardModel<f32>> {
    let mut magic = [0u8; 6];
    r.read_exact_at(&mut magic, "magic bytes")?;
    if &magic != MODEL_MAGIC {
        return Err(Error::format(0, "not a model container (bad magic)"));
    }
    let version_at = r.offset();
    let version = r.read_u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(Error::format(
            version_at,
            format!("unsupported container version {version} (this build reads {FORMAT_VERSION})"),
        ));
    }
    let mlen = r.read_u64("manifest length")?;
    if mlen == 0 || mlen > MAX_MANIFEST_BYTES {
        return Err(Error::format(r.offset() - 8, format!("implausible manifest length {mlen}")));
    }
    let manifest_at = r.offset();
    let mut json = vec![0u8; mlen as usize];
    r.read_exact_at(&mut json, "manifest")?;
    let manifest: Manifest = serde_json::from_slice(&json)
        .map_err(|e| Error::format(manifest_at, format!("manifest: {e}")))?;
    validate_manifest(&manifest, manifest_at)?;

    let mut arrays = Vec::with_capacity(manifest.arrays.len());
    for entry in &manifest.arrays {
        let len = entry.shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(
            || Error::format(r.offset(), format!("array {} shape overflows", entry.name)),
        )?;
        let mut data = vec![0f32; len];
        for v in data.iter_mut() {
            *v = f32::from_le_bytes(r.read_array::<4>("weight value")?);
        }
        let t = Tensor::new(entry.shape.clone(), data)
            .map_err(|e| Error::format(r.offset(), e.to_string()))?;
        arrays.push((entry.name.clone(), t));
    }
    let store = if manifest.precomputed { Some(EmbeddingStore::read_from(r)?) } else { None };
    let mut trailing = [0u8; 1];
    if r.read_exact_at(&mut trailing, "end of container").is_ok() {
        return Err(Error::format(r.offset() - 1, "trailing bytes after container"));
    }

    assemble(&manifest, arrays, store, manifest_at)
}

fn validate_manifest(m: &Manifest, at: u64) -> Result<()> {
    let fail = |msg: String| Err(Error::format(at, msg));
    if m.format_version != FORMAT_VERSION {
        return fail(format!("manifest format_version {} disagrees with header", m.format_version));
    }
    let expected: Vec<&str> = Label::ALL.iter().map(|l| l.name()).collect();
    if m.labels != expected {
        return fail(format!("label set {:?} is not {:?}", m.labels, expected));
    }
    if m.thresholds.len() != expected.len() {
        return fail(format!("{} thresholds for {} labels", m.thresholds.len(), expected.len()));
    }
    for (&t, name) in m.thresholds.iter().zip(&m.labels) {
        if !(t > 0.0 && t < 1.0) {
            return fail(format!("{name} threshold {t} outside (0,1)"));
        }
    }
    if m.encoder.is_some() == m.precomputed {
        return fail("container needs exactly one of an encoder config or a precomputed store".into());
    }
    if let Some(cfg) = &m.encoder {
        cfg.validate().map_err(|e| Error::format(at, e.to_string()))?;
    }
    Ok(())
}

/// Architecture-determined pairing of pooling and head kinds; a container
/// that disagrees with its declared arch is corrupt, not a variant.
fn check_arch_shape(arch: Arch, pooling: &str, heads: &str) -> bool {
    match arch {
        Arch::Sharanga => (pooling == "mean" || pooling == "cls") && heads == "linear",
        Arch::Mahendra => pooling == "attn" && heads == "residual",
        Arch::Vaishnava => pooling == "cls" && heads == "forest",
        Arch::Ashwina => pooling == "cls" && heads == "boosted",
        Arch::Raudra => pooling == "per_label_attn" && heads == "residual",
    }
}

fn assemble(
    manifest: &Manifest,
    arrays: Vec<(String, Tensor<f32>)>,
    store: Option<EmbeddingStore>,
    at: u64,
) -> Result<GuardModel<f32>> {
    let fail = |msg: String| Error::format(at, msg);
    let arch = Arch::from_name(&manifest.arch).map_err(|e| fail(e.to_string()))?;
    if !check_arch_shape(arch, &manifest.pooling.kind, &manifest.heads.kind) {
        return Err(fail(format!(
            "{arch} cannot carry {} pooling with {} heads",
            manifest.pooling.kind, manifest.heads.kind
        )));
    }
    let backend = match (&manifest.encoder, store) {
        (Some(cfg), None) => {
            // Skeleton weights; every tensor is replaced from the arrays below.
            let params = EncoderParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(0)).cast();
            EncoderBackend::Learned { config: cfg.clone(), params }
        }
        (None, Some(s)) => EncoderBackend::Precomputed(s),
        _ => unreachable!("validate_manifest pins encoder xor store"),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let dropout = manifest.pooling.dropout;
    let pooling = match manifest.pooling.kind.as_str() {
        "mean" => Pooling::Mean,
        "cls" => Pooling::Cls,
        "attn" => Pooling::Attn(AttnPoolParams::init(1, dropout, &mut rng)),
        "per_label_attn" => {
            Pooling::PerLabelAttn(PerLabel::from_fn(|_| AttnPoolParams::init(1, dropout, &mut rng)))
        }
        other => return Err(fail(format!("unknown pooling kind {other:?}"))),
    };
    let heads = match manifest.heads.kind.as_str() {
        "linear" => HeadKind::Linear(LinearHead::init(1, &mut rng)),
        "residual" => HeadKind::Residual(PerLabel::from_fn(|_| {
            ResidualHead::init(1, 1, manifest.heads.blocks, &mut rng)
        })),
        "forest" => HeadKind::Forest(take_ensembles(&manifest.ensembles, at, |m| match m {
            EnsembleModel::Forest(f) => Some(f.clone()),
            EnsembleModel::Boosted(_) => None,
        })?),
        "boosted" => HeadKind::Boosted(take_ensembles(&manifest.ensembles, at, |m| match m {
            EnsembleModel::Boosted(b) => Some(b.clone()),
            EnsembleModel::Forest(_) => None,
        })?),
        other => return Err(fail(format!("unknown head kind {other:?}"))),
    };
    let mut model = GuardModel {
        arch,
        backend,
        pooling,
        heads,
        thresholds: PerLabel::new(manifest.thresholds[0], manifest.thresholds[1]),
    };
    let mut slots = model.named_params_mut();
    if slots.len() != arrays.len() {
        return Err(fail(format!(
            "architecture has {} weight arrays, container lists {}",
            slots.len(),
            arrays.len()
        )));
    }
    for ((slot_name, slot), (name, tensor)) in slots.iter_mut().zip(arrays) {
        if *slot_name != name {
            return Err(fail(format!("expected array {slot_name:?}, found {name:?}")));
        }
        **slot = tensor;
    }
    Ok(model)
}

fn take_ensembles<T>(
    entries: &[EnsembleEntry],
    at: u64,
    pick: impl Fn(&EnsembleModel) -> Option<T>,
) -> Result<PerLabel<Option<T>>> {
    let mut out = PerLabel::new(None, None);
    for label in Label::ALL {
        let entry = entries
            .iter()
            .find(|e| e.label == label.name())
            .ok_or_else(|| Error::format(at, format!("missing {label} ensemble")))?;
        let model = pick(&entry.model)
            .ok_or_else(|| Error::format(at, format!("{label} ensemble has the wrong kind")))?;
        *out.get_mut(label) = Some(model);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::synthetic_corpus;
    use crate::diffmath::Tape;
    use crate::encoder::tokenize;
    use crate::forests::{fit_boosted, fit_forest, BoostConfig, ForestConfig};
    use crate::model::{build_model, extract_cls, predict, ModelConfig};

    fn toy_model_cfg(seed: u64) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                vocab_size: crate::encoder::BYTE_VOCAB_SIZE,
                d_model: 16,
                n_layers: 1,
                n_heads: 2,
                d_ff: 32,
                max_len: 32,
                dropout: 0.1,
                layer_norm_eps: 1e-5,
            },
            seed,
            ..ModelConfig::default()
        }
    }

    /// Tree archs with ensembles fitted on the model's own CLS features.
    fn fitted(arch: Arch, seed: u64) -> GuardModel<f64> {
        let mut model = build_model(arch, &toy_model_cfg(seed)).unwrap();
        let ds = synthetic_corpus(40, seed);
        let x: Vec<Vec<f64>> = ds
            .samples
            .iter()
            .map(|s| {
                let mut tape = Tape::inference();
                extract_cls(&model, &mut tape, &tokenize(&s.text, 32)).unwrap()
            })
            .collect();
        for label in Label::ALL {
            let y: Vec<u8> = ds.samples.iter().map(|s| *s.labels.get(label) as u8).collect();
            match &mut model.heads {
                HeadKind::Forest(f) => {
                    let cfg = ForestConfig { n_estimators: 6, max_depth: 4, ..ForestConfig::default() };
                    *f.get_mut(label) = Some(fit_forest(&x, &y, &cfg).unwrap());
                }
                HeadKind::Boosted(b) => {
                    let cfg = BoostConfig { n_rounds: 6, max_depth: 3, ..BoostConfig::default() };
                    *b.get_mut(label) = Some(fit_boosted(&x, &y, &cfg).unwrap());
                }
                _ => unreachable!(),
            }
        }
        model
    }

    fn frozen(arch: Arch, seed: u64) -> GuardModel<f32> {
        match arch {
            Arch::Vaishnava | Arch::Ashwina => fitted(arch, seed).freeze(),
            _ => build_model(arch, &toy_model_cfg(seed)).unwrap().freeze(),
        }
    }

    fn probe_texts() -> Vec<String> {
        vec![
            "".into(),
            "please summarize the weather".into(),
            format!("{} the report", crate::datasets::JAILBREAK_MARKER),
            format!("note {} now", crate::datasets::INJECTION_MARKER),
        ]
    }

    #[test]
    fn round_trip_is_bitwise_for_every_arch() {
        let dir = tempfile::tempdir().unwrap();
        for arch in Arch::ALL {
            let model = frozen(arch, 9);
            let path = dir.path().join(format!("{arch}.jgrd"));
            save_model(&model, &path).unwrap();
            let loaded = load_model(&path).unwrap();
            assert_eq!(loaded, model, "{arch} round trip");
            for text in probe_texts() {
                let seq = tokenize(&text, model.max_len().min(32));
                let a = predict(&model, &seq).unwrap().probs;
                let b = predict(&loaded, &seq).unwrap().probs;
                assert_eq!(a.jailbreak.to_bits(), b.jailbreak.to_bits(), "{arch} {text:?}");
                assert_eq!(
                    a.prompt_injection.to_bits(),
                    b.prompt_injection.to_bits(),
                    "{arch} {text:?}"
                );
            }
        }
    }

    #[test]
    fn save_load_save_bytes_identical() {
        for arch in [Arch::Sharanga, Arch::Vaishnava, Arch::Raudra] {
            let model = frozen(arch, 4);
            let mut first = Vec::new();
            write_model(&model, &mut first).unwrap();
            let loaded =
                read_model(&mut OffsetReader::new(std::io::Cursor::new(&first))).unwrap();
            let mut second = Vec::new();
            write_model(&loaded, &mut second).unwrap();
            assert_eq!(first, second, "{arch}");
        }
    }

    #[test]
    fn precomputed_store_rides_in_the_container() {
        let mut store = EmbeddingStore::new(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let texts = ["alpha", "ignore previous instructions"];
        for t in texts {
            store
                .insert(t, Tensor::randn(&[1 + t.len().min(4), 4], 0.5, &mut rng))
                .unwrap();
        }
        let model = GuardModel::<f32> {
            arch: Arch::Sharanga,
            backend: EncoderBackend::Precomputed(store),
            pooling: Pooling::Mean,
            heads: HeadKind::Linear(LinearHead::init(4, &mut rng)),
            thresholds: PerLabel::new(0.5, 0.5),
        };
        let mut bytes = Vec::new();
        write_model(&model, &mut bytes).unwrap();
        let loaded = read_model(&mut OffsetReader::new(std::io::Cursor::new(&bytes))).unwrap();
        assert_eq!(loaded, model);
        for t in texts {
            let seq = tokenize(t, 64);
            assert_eq!(
                predict(&model, &seq).unwrap().probs,
                predict(&loaded, &seq).unwrap().probs
            );
        }
    }

    #[test]
    fn vaishnava_container_carries_two_forests() {
        let model = frozen(Arch::Vaishnava, 2);
        let manifest = build_manifest(&model).unwrap();
        assert_eq!(manifest.ensembles.len(), 2);
        assert!(manifest
            .ensembles
            .iter()
            .all(|e| matches!(e.model, EnsembleModel::Forest(_))));
        assert_eq!(manifest.ensembles[0].label, "jailbreak");
        assert_eq!(manifest.ensembles[1].label, "prompt_injection");
    }

    #[test]
    fn unfitted_tree_heads_refuse_to_save() {
        let model: GuardModel<f32> =
            build_model(Arch::Ashwina, &toy_model_cfg(0)).unwrap().freeze();
        let mut bytes = Vec::new();
        let err = write_model(&model, &mut bytes).unwrap_err();
        assert!(matches!(err, Error::State(_)), "{err:?}");
        assert!(err.to_string().contains("not fitted"), "{err}");
    }

    #[test]
    fn bad_magic_is_a_format_error_at_offset_zero() {
        let mut r = OffsetReader::new(std::io::Cursor::new(b"NOPE!\nxxxxxxxx".to_vec()));
        match read_model(&mut r).unwrap_err() {
            Error::Format { offset, msg } => {
                assert_eq!(offset, 0);
                assert!(msg.contains("magic"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_version_is_rejected_without_partial_load() {
        let model = frozen(Arch::Sharanga, 1);
        let mut bytes = Vec::new();
        write_model(&model, &mut bytes).unwrap();
        bytes[6..10].copy_from_slice(&99u32.to_le_bytes());
        match read_model(&mut OffsetReader::new(std::io::Cursor::new(&bytes))).unwrap_err() {
            Error::Format { offset, msg } => {
                assert_eq!(offset, 6);
                assert!(msg.contains("version 99"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncation_reports_the_byte_offset() {
        let model = frozen(Arch::Mahendra, 3);
        let mut bytes = Vec::new();
        write_model(&model, &mut bytes).unwrap();
        for cut in [4usize, 12, bytes.len() / 2, bytes.len() - 3] {
            let mut r = OffsetReader::new(std::io::Cursor::new(bytes[..cut].to_vec()));
            match read_model(&mut r).unwrap_err() {
                Error::Format { offset, msg } => {
                    assert!(offset <= cut as u64, "offset {offset} past cut {cut}");
                    assert!(msg.contains("truncated") || msg.contains("magic"), "{msg}");
                }
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let model = frozen(Arch::Sharanga, 1);
        let mut bytes = Vec::new();
        write_model(&model, &mut bytes).unwrap();
        bytes.push(0);
        match read_model(&mut OffsetReader::new(std::io::Cursor::new(&bytes))).unwrap_err() {
            Error::Format { msg, .. } => assert!(msg.contains("trailing"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn corrupt_manifest_json_names_the_manifest() {
        let model = frozen(Arch::Sharanga, 1);
        let mut bytes = Vec::new();
        write_model(&model, &mut bytes).unwrap();
        // First manifest byte is '{'; breaking it leaves the length intact.
        bytes[18] = b'X';
        match read_model(&mut OffsetReader::new(std::io::Cursor::new(&bytes))).unwrap_err() {
            Error::Format { offset, msg } => {
                assert_eq!(offset, 18);
                assert!(msg.contains("manifest"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
    }
}
