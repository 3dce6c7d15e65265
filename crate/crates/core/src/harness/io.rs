//! File formats: tensors, scene manifests, PNG frames and decoder weights.
//!
//! Tensor files are `"NVT1"`, a little-endian `u32` rank, `rank` little-endian
//! `u32` dimensions and a C-order little-endian `f32` payload, without padding.

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{Dense, DecoderMlp, FeatureVolume, FieldError};
use crate::geometry::{Camera, GeometryError};
use crate::harness::Frame;
use crate::image::Image;

pub const TENSOR_MAGIC: &[u8; 4] = b"NVT1";

#[derive(Debug, Error)]
pub enum TensorIoError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("dimensions {0:?} overflow the addressable size")]
    DimensionOverflow(Vec<u32>),
    #[error("payload holds {actual} bytes, header implies {expected}")]
    PayloadLength { expected: usize, actual: usize },
    #[error("non-finite value at element {0}")]
    NonFinite(usize),
}

impl TensorIoError {
    /// Stable numeric identifier per failure class.
    pub fn code(&self) -> u8 {
        match self {
            TensorIoError::Io(_) => 1,
            TensorIoError::BadMagic(_) => 2,
            TensorIoError::MalformedHeader(_) => 3,
            TensorIoError::DimensionOverflow(_) => 4,
            TensorIoError::PayloadLength { .. } => 5,
            TensorIoError::NonFinite(_) => 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(dims.iter().product::<usize>(), data.len(), "dims do not match data");
        Self { dims, data }
    }

    pub fn from_f64(dims: Vec<usize>, data: &[f64]) -> Self {
        Self::new(dims, data.iter().map(|&v| v as f32).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }
}

impl From<&Image> for Tensor {
    fn from(image: &Image) -> Self {
        let (c, h, w) = image.shape();
        Tensor::from_f64(vec![c, h, w], image.data())
    }
}

impl From<&FeatureVolume> for Tensor {
    fn from(volume: &FeatureVolume) -> Self {
        Tensor::from_f64(volume.dims().to_vec(), volume.data())
    }
}

pub fn write_tensor<W: Write>(mut out: W, tensor: &Tensor) -> Result<(), TensorIoError> {
    if let Some(i) = tensor.data.iter().position(|v| !v.is_finite()) {
        return Err(TensorIoError::NonFinite(i));
    }
    let dims: Vec<u32> = tensor
        .dims
        .iter()
        .map(|&d| u32::try_from(d))
        .collect::<Result<_, _>>()
        .map_err(|_| TensorIoError::DimensionOverflow(tensor.dims.iter().map(|&d| d as u32).collect()))?;
    out.write_all(TENSOR_MAGIC)?;
    out.write_all(&(dims.len() as u32).to_le_bytes())?;
    for d in &dims {
        out.write_all(&d.to_le_bytes())?;
    }
    for v in &tensor.data {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_tensor<R: Read>(mut input: R) -> Result<Tensor, TensorIoError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    decode_tensor(&bytes)
}

fn take_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32, TensorIoError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| TensorIoError::MalformedHeader(format!("truncated before {what}")))
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor, TensorIoError> {
    let magic: [u8; 4] = bytes
        .get(..4)
        .ok_or_else(|| TensorIoError::MalformedHeader("file shorter than magic".into()))?
        .try_into()
        .unwrap();
    if &magic != TENSOR_MAGIC {
        return Err(TensorIoError::BadMagic(magic));
    }
    let rank = take_u32(bytes, 4, "rank")? as usize;
    let header = rank
        .checked_mul(4)
        .and_then(|r| r.checked_add(8))
        .filter(|&h| h <= bytes.len())
        .ok_or_else(|| TensorIoError::MalformedHeader(format!("rank {rank} exceeds file size")))?;
    let raw_dims: Vec<u32> = (0..rank)
        .map(|i| take_u32(bytes, 8 + 4 * i, "dimension"))
        .collect::<Result<_, _>>()?;
    let count = raw_dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .filter(|c| c.checked_mul(4).is_some())
        .ok_or_else(|| TensorIoError::DimensionOverflow(raw_dims.clone()))?;
    let payload = &bytes[header..];
    if payload.len() != count * 4 {
        return Err(TensorIoError::PayloadLength {
            expected: count * 4,
            actual: payload.len(),
        });
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(TensorIoError::NonFinite(i));
    }
    Ok(Tensor {
        dims: raw_dims.into_iter().map(|d| d as usize).collect(),
        data,
    })
}

pub fn save_tensor(path: &Path, tensor: &Tensor) -> Result<(), TensorIoError> {
    write_tensor(BufWriter::new(File::create(path)?), tensor)
}

pub fn load_tensor(path: &Path) -> Result<Tensor, TensorIoError> {
    read_tensor(BufReader::new(File::open(path)?))
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error("manifest has no frames")]
    Empty,
    #[error("frame {index}: invalid pose: {reason}")]
    InvalidPose { index: usize, reason: String },
    #[error("frame {index}: {reason}")]
    InvalidCamera { index: usize, reason: String },
    #[error("frame {0}: no resolution given and no image to read it from")]
    MissingResolution(usize),
    #[error("frame {index}: image error: {source}")]
    Image {
        index: usize,
        #[source]
        source: ImageIoError,
    },
}

/// One posed frame. `image` may be absent for target-only trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    pub pose: [f64; 16],
    pub fov_y_deg: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    pub near: f64,
    pub far: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
    pub frames: Vec<FrameRecord>,
}

impl SceneManifest {
    pub fn from_cameras(cameras: &[Camera], images: Option<&[String]>) -> Self {
        let (near, far) = cameras.first().map_or((0.0, 1.0), |c| (c.near(), c.far()));
        Self {
            near,
            far,
            width: None,
            height: None,
            frames: cameras
                .iter()
                .enumerate()
                .map(|(i, c)| FrameRecord {
                    image: images.map(|imgs| imgs[i].clone()),
                    pose: c.pose_row_major(),
                    fov_y_deg: c.fov_y_deg(),
                    width: Some(c.width()),
                    height: Some(c.height()),
                })
                .collect(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, ManifestError> {
        let manifest: SceneManifest = serde_json::from_str(text)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let text = fs::read_to_string(path).map_err(|source| ManifestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), ManifestError> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|source| ManifestError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Structural checks that need no file access.
    pub fn validate(&self) -> Result<(), ManifestError> {
        if self.frames.is_empty() {
            return Err(ManifestError::Empty);
        }
        for (index, record) in self.frames.iter().enumerate() {
            self.camera_with_resolution(index, record, 1, 1)?;
        }
        Ok(())
    }

    fn camera_with_resolution(
        &self,
        index: usize,
        record: &FrameRecord,
        width: usize,
        height: usize,
    ) -> Result<Camera, ManifestError> {
        Camera::from_row_major(&record.pose, record.fov_y_deg, width, height, self.near, self.far).map_err(|e| match e {
            GeometryError::InvalidPose(reason) => ManifestError::InvalidPose { index, reason },
            GeometryError::InvalidIntrinsics(reason) => ManifestError::InvalidCamera { index, reason },
        })
    }

    /// Cameras for every frame. Resolution comes from the record, then the
    /// manifest defaults, then the referenced image (relative to `base`).
    pub fn cameras(&self, base: &Path) -> Result<Vec<Camera>, ManifestError> {
        self.frames
            .iter()
            .enumerate()
            .map(|(index, record)| {
                let explicit = record.width.or(self.width).zip(record.height.or(self.height));
                let (w, h) = match (explicit, &record.image) {
                    (Some(wh), _) => wh,
                    (None, Some(image)) => {
                        let (w, h) = ::image::image_dimensions(base.join(image)).map_err(|e| ManifestError::Image {
                            index,
                            source: ImageIoError::Codec(e),
                        })?;
                        (w as usize, h as usize)
                    }
                    (None, None) => return Err(ManifestError::MissingResolution(index)),
                };
                self.camera_with_resolution(index, record, w, h)
            })
            .collect()
    }

    /// Loads every frame's image; all records must reference one.
    pub fn frames(&self, base: &Path) -> Result<Vec<Frame>, ManifestError> {
        let cameras = self.cameras(base)?;
        self.frames
            .iter()
            .zip(cameras)
            .enumerate()
            .map(|(index, (record, camera))| {
                let path = record.image.as_ref().ok_or(ManifestError::Image {
                    index,
                    source: ImageIoError::Missing,
                })?;
                let image = read_png(&base.join(path)).map_err(|source| ManifestError::Image { index, source })?;
                if image.height() != camera.height() || image.width() != camera.width() {
                    return Err(ManifestError::InvalidCamera {
                        index,
                        reason: format!(
                            "image is {}x{} but the camera is {}x{}",
                            image.width(),
                            image.height(),
                            camera.width(),
                            camera.height()
                        ),
                    });
                }
                Ok(Frame { image, camera })
            })
            .collect()
    }
}

#[derive(Debug, Error)]
pub enum ImageIoError {
    #[error(transparent)]
    Codec(#[from] ::image::ImageError),
    #[error("expected a 3-channel image, got {0} channels")]
    Channels(usize),
    #[error("frame has no image path")]
    Missing,
}

/// Writes a 3-channel image in `[−1, 1]` as 8-bit RGB.
pub fn write_png(path: &Path, image: &Image) -> Result<(), ImageIoError> {
    if image.channels() != 3 {
        return Err(ImageIoError::Channels(image.channels()));
    }
    let (w, h) = (image.width(), image.height());
    let mut buf = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = (image.get(c, y, x) + 1.0) * 0.5 * 255.0;
                buf.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    ::image::save_buffer(path, &buf, w as u32, h as u32, ::image::ColorType::Rgb8)?;
    Ok(())
}

/// Reads any 8-bit image as RGB mapped to `[−1, 1]`.
pub fn read_png(path: &Path) -> Result<Image, ImageIoError> {
    let rgb = ::image::open(path)?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    Ok(Image::from_fn(3, h, w, |c, y, x| {
        f64::from(rgb.get_pixel(x as u32, y as u32)[c]) / 255.0 * 2.0 - 1.0
    }))
}

#[derive(Debug, Error)]
pub enum DecoderIoError {
    #[error(transparent)]
    Tensor(#[from] TensorIoError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("sidecar manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("layer {name}: expected shape {expected:?}, file holds {actual:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerEntry {
    pub name: String,
    pub weight: String,
    pub bias: String,
    /// `[outputs, inputs]`
    pub shape: [usize; 2],
}

/// Sidecar describing decoder layer order and shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderManifest {
    pub hidden_activation: String,
    pub density_activation: String,
    pub input_skip: bool,
    pub layers: Vec<LayerEntry>,
}

pub const DECODER_MANIFEST: &str = "decoder.json";

pub fn save_decoder(dir: &Path, mlp: &DecoderMlp) -> Result<(), DecoderIoError> {
    fs::create_dir_all(dir)?;
    let mut layers = Vec::new();
    for (i, layer) in mlp.layers().iter().enumerate() {
        let name = format!("layer{i}");
        let entry = LayerEntry {
            weight: format!("{name}.weight.nvt"),
            bias: format!("{name}.bias.nvt"),
            shape: [layer.outputs(), layer.inputs()],
            name,
        };
        save_tensor(&dir.join(&entry.weight), &Tensor::from_f64(vec![layer.outputs(), layer.inputs()], layer.weights()))?;
        save_tensor(&dir.join(&entry.bias), &Tensor::from_f64(vec![layer.outputs()], layer.bias()))?;
        layers.push(entry);
    }
    let manifest = DecoderManifest {
        hidden_activation: "relu".into(),
        density_activation: "softplus".into(),
        input_skip: true,
        layers,
    };
    fs::write(dir.join(DECODER_MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn load_decoder(dir: &Path) -> Result<DecoderMlp, DecoderIoError> {
    let manifest: DecoderManifest = serde_json::from_str(&fs::read_to_string(dir.join(DECODER_MANIFEST))?)?;
    if manifest.layers.len() != 3 {
        return Err(FieldError::LayerShape(format!("expected 3 layers, manifest lists {}", manifest.layers.len())).into());
    }
    let mut dense = Vec::with_capacity(3);
    for entry in &manifest.layers {
        let weight = load_tensor(&dir.join(&entry.weight))?;
        let bias = load_tensor(&dir.join(&entry.bias))?;
        let [outputs, inputs] = entry.shape;
        for (tensor, expected) in [(&weight, vec![outputs, inputs]), (&bias, vec![outputs])] {
            if tensor.dims != expected {
                return Err(DecoderIoError::Shape {
                    name: entry.name.clone(),
                    expected,
                    actual: tensor.dims.clone(),
                });
            }
        }
        dense.push(Dense::new(inputs, outputs, weight.to_f64(), bias.to_f64())?);
    }
    let third = dense.pop().unwrap();
    let second = dense.pop().unwrap();
    let first = dense.pop().unwrap();
    Ok(DecoderMlp::new(first, second, third)?)
}
