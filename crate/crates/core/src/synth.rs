//! Synthetic device-shift scene benchmark, generated directly in log-mel space.
//!
//! Each class has a prototype built from band-limited energy bumps with a
//! temporal modulation. Each device adds a smooth log-gain curve and a noise
//! floor. Devices S4-S6 draw their response from a wider distribution and
//! never appear in the training split.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Device {
    A,
    B,
    C,
    S1,
    S2,
    S3,
    S4,
    S5,
    S6,
}

impl Device {
    pub const ALL: [Device; 9] = [
        Device::A,
        Device::B,
        Device::C,
        Device::S1,
        Device::S2,
        Device::S3,
        Device::S4,
        Device::S5,
        Device::S6,
    ];

    /// Devices held out of training.
    pub fn is_ood(self) -> bool {
        matches!(self, Device::S4 | Device::S5 | Device::S6)
    }
}

impl fmt::Display for Device {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for Device {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Device::ALL
            .into_iter()
            .find(|d| d.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown device `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub classes: usize,
    pub bins: usize,
    pub frames: usize,
    pub train: usize,
    pub test: usize,
    /// Fraction of the training split recorded on device A.
    pub device_a_share: f64,
    /// Scales every per-sample source of variation. Zero makes samples of a
    /// class on one device identical.
    pub noise: f64,
    /// Scales device responses. Zero makes every device the identity.
    pub device_shift: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            classes: 10,
            bins: 64,
            frames: 101,
            train: 1200,
            test: 600,
            device_a_share: 0.4,
            noise: 1.0,
            device_shift: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid("need at least 2 classes"));
        }
        if self.train < self.classes || self.test < self.classes {
            return Err(Error::invalid(format!(
                "split sizes ({}, {}) must be at least the class count {}",
                self.train, self.test, self.classes
            )));
        }
        if self.bins < 4 || self.frames < 1 {
            return Err(Error::invalid("need at least 4 mel bins and 1 frame"));
        }
        if !(0.0..=1.0).contains(&self.device_a_share) {
            return Err(Error::invalid("device A share must lie in [0, 1]"));
        }
        if !(self.noise >= 0.0 && self.device_shift >= 0.0) {
            return Err(Error::invalid("noise and device shift must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub device: Device,
    /// Multiplicative gain per mel bin.
    pub response: Vec<f32>,
    pub gain_db: f64,
    pub noise_level: f64,
}

impl DeviceProfile {
    /// Log-domain offset per mel bin.
    fn log_offset(&self) -> Vec<f64> {
        let g = self.gain_db * std::f64::consts::LN_10 / 10.0;
        self.response.iter().map(|&r| (r as f64).ln() + g).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[bins, frames]` log-mel energies.
    pub features: Tensor<f32>,
    pub label: usize,
    pub device: Device,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    pub devices: Vec<DeviceProfile>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn train(&self) -> Vec<&Sample> {
        self.split(Split::Train)
    }

    pub fn test(&self) -> Vec<&Sample> {
        self.split(Split::Test)
    }
}

/// `(features, label)` views for training and evaluation.
pub fn examples<'a>(samples: &[&'a Sample]) -> Vec<(&'a Tensor<f32>, usize)> {
    samples.iter().map(|s| (&s.features, s.label)).collect()
}

/// Partitions test samples into seen-device and held-out-device lists.
pub fn split_iid_ood<'a>(samples: &[&'a Sample]) -> Result<(Vec<&'a Sample>, Vec<&'a Sample>)> {
    let mut iid = Vec::new();
    let mut ood = Vec::new();
    for &s in samples {
        if s.split != Split::Test {
            return Err(Error::invalid("split_iid_ood expects test-split samples"));
        }
        if s.device.is_ood() {
            ood.push(s);
        } else {
            iid.push(s);
        }
    }
    Ok((iid, ood))
}

struct Band {
    center: f64,
    width: f64,
    amplitude: f64,
    mod_freq: f64,
    mod_phase: f64,
    mod_depth: f64,
}

struct Prototype {
    tilt: f64,
    bands: Vec<Band>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn draw_prototype(rng: &mut ChaCha8Rng, bins: usize) -> Prototype {
    let m = bins as f64;
    let bands = (0..3)
        .map(|_| Band {
            center: rng.gen_range(0.05 * m..0.95 * m),
            width: rng.gen_range(0.03 * m..0.1 * m),
            amplitude: rng.gen_range(1.5..3.0),
            mod_freq: rng.gen_range(0..5) as f64,
            mod_phase: rng.gen_range(0.0..std::f64::consts::TAU),
            mod_depth: rng.gen_range(0.2..0.8),
        })
        .collect();
    Prototype {
        tilt: rng.gen_range(-1.0..1.0),
        bands,
    }
}

fn draw_device(rng: &mut ChaCha8Rng, device: Device, bins: usize, shift: f64) -> DeviceProfile {
    let (spread, gain_range, noise) = match device {
        Device::A => (0.0, 0.0, 0.05),
        d if d.is_ood() => (0.9, 4.0, 0.3),
        _ => (0.35, 1.5, 0.15),
    };
    let coeffs: Vec<f64> = (1..=4).map(|q| spread * shift * normal(rng) / q as f64).collect();
    let response = (0..bins)
        .map(|m| {
            let x = std::f64::consts::PI * (m as f64 + 0.5) / bins as f64;
            let lg: f64 = coeffs.iter().enumerate().map(|(q, c)| c * (x * (q + 1) as f64).cos()).sum();
            lg.exp() as f32
        })
        .collect();
    let gain_db = if gain_range > 0.0 {
        shift * rng.gen_range(-gain_range..gain_range)
    } else {
        0.0
    };
    DeviceProfile {
        device,
        response,
        gain_db,
        noise_level: noise * shift,
    }
}

fn render(
    proto: &Prototype,
    device: &[f64],
    noise_level: f64,
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<f32>> {
    let (bins, frames) = (cfg.bins, cfg.frames);
    let s = cfg.noise;
    // Per-sample variation, all scaled by the noise knob.
    let center_jitter: Vec<f64> = proto.bands.iter().map(|_| s * 0.02 * bins as f64 * normal(rng)).collect();
    let amp_jitter: Vec<f64> = proto.bands.iter().map(|_| (s * 0.25 * normal(rng)).exp()).collect();
    let phase = s * rng.gen_range(0.0..std::f64::consts::TAU);
    let color: Vec<f64> = (0..3).map(|_| s * 0.3 * normal(rng)).collect();
    let white = s * (0.6 + noise_level);

    let mut data = Vec::with_capacity(bins * frames);
    for m in 0..bins {
        let x = m as f64 / bins as f64;
        let mut base = -4.0 + proto.tilt * (x - 0.5) * 2.0 + device[m];
        for (q, c) in color.iter().enumerate() {
            base += c * (std::f64::consts::PI * x * (q + 1) as f64).cos();
        }
        for t in 0..frames {
            let tt = t as f64 / frames as f64;
            let mut v = base;
            for (b, band) in proto.bands.iter().enumerate() {
                let d = (m as f64 - band.center - center_jitter[b]) / band.width;
                let envelope = 1.0 - band.mod_depth
                    + band.mod_depth
                        * (0.5 + 0.5 * (std::f64::consts::TAU * band.mod_freq * tt + band.mod_phase + phase).cos());
                v += band.amplitude * amp_jitter[b] * envelope * (-0.5 * d * d).exp();
            }
            if white > 0.0 {
                v += white * normal(rng);
            }
            data.push(v as f32);
        }
    }
    Tensor::new(vec![bins, frames], data)
}

fn device_schedule(n: usize, weights: &[(Device, f64)]) -> Vec<Device> {
    // Largest-remainder apportionment of n slots.
    let total: f64 = weights.iter().map(|w| w.1).sum();
    let quotas: Vec<f64> = weights.iter().map(|w| w.1 / total * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    weights
        .iter()
        .zip(counts)
        .flat_map(|(w, c)| std::iter::repeat(w.0).take(c))
        .collect()
}

/// Generates the benchmark. Identical configs give bit-identical datasets.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let protos: Vec<Prototype> = (0..cfg.classes).map(|_| draw_prototype(&mut rng, cfg.bins)).collect();
    let devices: Vec<DeviceProfile> = Device::ALL
        .iter()
        .map(|&d| draw_device(&mut rng, d, cfg.bins, cfg.device_shift))
        .collect();
    let offsets: Vec<Vec<f64>> = devices.iter().map(DeviceProfile::log_offset).collect();

    let others = (1.0 - cfg.device_a_share) / 5.0;
    let train_weights: Vec<(Device, f64)> = Device::ALL
        .iter()
        .filter(|d| !d.is_ood())
        .map(|&d| (d, if d == Device::A { cfg.device_a_share } else { others }))
        .collect();
    let test_weights: Vec<(Device, f64)> = Device::ALL.iter().map(|&d| (d, 1.0)).collect();

    let mut samples = Vec::with_capacity(cfg.train + cfg.test);
    for (split, n, weights) in [
        (Split::Train, cfg.train, &train_weights),
        (Split::Test, cfg.test, &test_weights),
    ] {
        let mut devs = device_schedule(n, weights);
        devs.shuffle(&mut rng);
        let mut labels: Vec<usize> = (0..n).map(|i| i % cfg.classes).collect();
        labels.shuffle(&mut rng);
        for (device, label) in devs.into_iter().zip(labels) {
            let di = Device::ALL.iter().position(|&d| d == device).expect("known device");
            let features = render(&protos[label], &offsets[di], devices[di].noise_level, cfg, &mut rng)?;
            samples.push(Sample {
                features,
                label,
                device,
                split,
            });
        }
    }
    Ok(Dataset {
        config: cfg.clone(),
        devices,
        samples,
    })
}

#[derive(Serialize, Deserialize)]
struct ManifestRow {
    filename: String,
    label: usize,
    device: String,
    split: String,
}

const MANIFEST: &str = "manifest.csv";
const CONFIG: &str = "dataset.json";

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    config: SynthConfig,
    devices: Vec<DeviceProfile>,
}

/// Writes one little-endian `f32` file per sample plus `manifest.csv` and
/// `dataset.json`.
pub fn export_dataset(data: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut w = csv::Writer::from_path(dir.join(MANIFEST))?;
    for (i, s) in data.samples.iter().enumerate() {
        let filename = format!("{}_{i:05}.f32", s.split);
        let path = dir.join(&filename);
        let mut bytes = Vec::with_capacity(4 * s.features.numel());
        for v in s.features.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        w.serialize(ManifestRow {
            filename,
            label: s.label,
            device: s.device.to_string(),
            split: s.split.to_string(),
        })?;
    }
    w.flush().map_err(|e| Error::io(dir.join(MANIFEST), e))?;
    let header = DatasetHeader {
        config: data.config.clone(),
        devices: data.devices.clone(),
    };
    let path = dir.join(CONFIG);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::to_writer_pretty(&mut f, &header)?;
    f.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    Ok(())
}

pub fn import_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(CONFIG);
    let header: DatasetHeader =
        serde_json::from_reader(fs::File::open(&path).map_err(|e| Error::io(&path, e))?)?;
    let cfg = header.config;
    let mut r = csv::Reader::from_path(dir.join(MANIFEST))?;
    let mut samples = Vec::new();
    for row in r.deserialize() {
        let row: ManifestRow = row?;
        let path = dir.join(&row.filename);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() != 4 * cfg.bins * cfg.frames {
            return Err(Error::Format(format!(
                "{}: {} bytes, expected {}",
                row.filename,
                bytes.len(),
                4 * cfg.bins * cfg.frames
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let device: Device = row.device.parse()?;
        let split: Split = row.split.parse()?;
        if row.label >= cfg.classes {
            return Err(Error::Format(format!("{}: label {} out of range", row.filename, row.label)));
        }
        if split == Split::Train && device.is_ood() {
            return Err(Error::Format(format!("{}: held-out device in training split", row.filename)));
        }
        samples.push(Sample {
            features: Tensor::new(vec![cfg.bins, cfg.frames], data)?,
            label: row.label,
            device,
            split,
        });
    }
    Ok(Dataset {
        config: cfg,
        devices: header.devices,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            seed,
            frames: 16,
            train: 120,
            test: 90,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_dataset(&small(3)).unwrap();
        let b = generate_dataset(&small(3)).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&small(4)).unwrap();
        assert_ne!(a.samples[0].features, c.samples[0].features);
    }

    #[test]
    fn training_split_device_histogram() {
        let d = generate_dataset(&small(1)).unwrap();
        let mut hist: BTreeMap<Device, usize> = BTreeMap::new();
        for s in d.train() {
            *hist.entry(s.device).or_default() += 1;
        }
        let a = hist[&Device::A];
        assert_eq!(a, 48);
        for dev in Device::ALL {
            if dev.is_ood() {
                assert!(!hist.contains_key(&dev));
            } else if dev != Device::A {
                assert!(hist[&dev] < a);
            }
        }
    }

    #[test]
    fn classes_are_balanced_per_split() {
        let mut cfg = small(2);
        cfg.train = 123;
        cfg.test = 97;
        let d = generate_dataset(&cfg).unwrap();
        for split in [Split::Train, Split::Test] {
            let mut counts = vec![0usize; 10];
            for s in d.split(split) {
                counts[s.label] += 1;
            }
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            assert!(hi - lo <= 1, "{split}: {counts:?}");
        }
    }

    #[test]
    fn noiseless_identity_devices_make_class_samples_identical() {
        let mut cfg = small(5);
        cfg.noise = 0.0;
        cfg.device_shift = 0.0;
        let d = generate_dataset(&cfg).unwrap();
        let class0: Vec<&Sample> = d.samples.iter().filter(|s| s.label == 0).collect();
        assert!(class0.len() > 2);
        for s in &class0[1..] {
            assert_eq!(s.features, class0[0].features);
        }
        let class1 = d.samples.iter().find(|s| s.label == 1).unwrap();
        assert_ne!(class1.features, class0[0].features);
    }

    #[test]
    fn device_gains_are_positive_and_ood_spread_is_wider() {
        let d = generate_dataset(&small(6)).unwrap();
        let spread = |p: &DeviceProfile| {
            let l = p.log_offset();
            l.iter().map(|v| v * v).sum::<f64>() / l.len() as f64
        };
        assert!(d.devices.iter().all(|p| p.response.iter().all(|&g| g > 0.0)));
        assert_eq!(d.devices.len(), 9);
        let iid: f64 = d.devices.iter().filter(|p| !p.device.is_ood()).map(spread).sum::<f64>() / 6.0;
        let ood: f64 = d.devices.iter().filter(|p| p.device.is_ood()).map(spread).sum::<f64>() / 3.0;
        assert!(ood > iid, "ood {ood} iid {iid}");
    }

    #[test]
    fn iid_ood_partition() {
        let d = generate_dataset(&small(7)).unwrap();
        let test = d.test();
        let (iid, ood) = split_iid_ood(&test).unwrap();
        assert_eq!(iid.len() + ood.len(), test.len());
        assert!(iid.iter().all(|s| !s.device.is_ood()));
        assert!(ood.iter().all(|s| s.device.is_ood()));
        let (a, b) = split_iid_ood(&[]).unwrap();
        assert!(a.is_empty() && b.is_empty());
        let train = d.train();
        assert!(split_iid_ood(&train[..1]).is_err());

        let picked: Vec<&Sample> = test
            .iter()
            .copied()
            .filter(|s| matches!(s.device, Device::A | Device::S4))
            .collect();
        let (iid, ood) = split_iid_ood(&picked).unwrap();
        assert!(iid.iter().all(|s| s.device == Device::A));
        assert!(ood.iter().all(|s| s.device == Device::S4));
        assert!(!iid.is_empty() && !ood.is_empty());
    }

    #[test]
    fn undersized_splits_are_rejected() {
        let mut cfg = small(1);
        cfg.test = 9;
        assert!(generate_dataset(&cfg).is_err());
    }

    #[test]
    fn device_parsing() {
        assert_eq!("s4".parse::<Device>().unwrap(), Device::S4);
        assert!("S7".parse::<Device>().is_err());
    }

    #[test]
    fn export_import_round_trip() {
        let d = generate_dataset(&small(8)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_dataset(&d, dir.path()).unwrap();
        let back = import_dataset(dir.path()).unwrap();
        assert_eq!(d, back);
        let text = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        assert!(text.starts_with("filename,label,device,split\n"));
    }
}
