//! Minimal single-file NIfTI-1 (`.nii`) reader and writer.
//!
//! Only uncompressed little-endian 3D images with datatype uint8, int16 or
//! float32 are supported. Orientation (qform/sform) is ignored and spacing is
//! taken from `pixdim[1..=3]`. Intensity scaling (`scl_slope`/`scl_inter`) is
//! not applied, so stored values round-trip bit-exactly.
//!
//! Multi-channel probability volumes are stored as a single 3D float32 image
//! whose channels are stacked along z; the channel count is recorded in the
//! `intent_name` field as `channels:N`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{BinaryVolume, ChannelVolume, Geometry, Grid, LabelVolume, ProbVolume, Volume};

pub const HEADER_SIZE: usize = 348;
pub const VOX_OFFSET: usize = 352;
pub const MAGIC: &[u8; 4] = b"n+1\0";

const CHANNELS_INTENT: &str = "channels:";

/// Voxel storage types understood by the reader and writer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Datatype {
    U8,
    I16,
    F32,
}

impl Datatype {
    pub fn code(self) -> i16 {
        match self {
            Datatype::U8 => 2,
            Datatype::I16 => 4,
            Datatype::F32 => 16,
        }
    }

    pub fn from_code(code: i16) -> Result<Self> {
        match code {
            2 => Ok(Datatype::U8),
            4 => Ok(Datatype::I16),
            16 => Ok(Datatype::F32),
            other => Err(Error::UnsupportedDatatype(other)),
        }
    }

    pub fn bytes_per_voxel(self) -> usize {
        match self {
            Datatype::U8 => 1,
            Datatype::I16 => 2,
            Datatype::F32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum VoxelData {
    U8(Vec<u8>),
    I16(Vec<i16>),
    F32(Vec<f32>),
}

impl VoxelData {
    pub fn datatype(&self) -> Datatype {
        match self {
            VoxelData::U8(_) => Datatype::U8,
            VoxelData::I16(_) => Datatype::I16,
            VoxelData::F32(_) => Datatype::F32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            VoxelData::U8(v) => v.len(),
            VoxelData::I16(v) => v.len(),
            VoxelData::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn to_le_bytes(&self) -> Vec<u8> {
        match self {
            VoxelData::U8(v) => v.clone(),
            VoxelData::I16(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            VoxelData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    fn from_le_bytes(datatype: Datatype, bytes: &[u8]) -> Self {
        match datatype {
            Datatype::U8 => VoxelData::U8(bytes.to_vec()),
            Datatype::I16 => VoxelData::I16(
                bytes
                    .chunks_exact(2)
                    .map(|b| i16::from_le_bytes([b[0], b[1]]))
                    .collect(),
            ),
            Datatype::F32 => VoxelData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect(),
            ),
        }
    }

    fn as_f64(&self) -> Vec<f64> {
        match self {
            VoxelData::U8(v) => v.iter().map(|&x| x as f64).collect(),
            VoxelData::I16(v) => v.iter().map(|&x| x as f64).collect(),
            VoxelData::F32(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }
}

/// A decoded image: geometry, raw voxels in file order, and the two free-text
/// header fields this crate uses.
#[derive(Clone, Debug, PartialEq)]
pub struct NiftiImage {
    pub geom: Geometry,
    pub data: VoxelData,
    pub intent_name: String,
    pub descrip: String,
}

fn read_i16(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn read_i32(b: &[u8], off: usize) -> i32 {
    i32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

fn read_f32(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

fn read_cstr(b: &[u8]) -> String {
    let end = b.iter().position(|&c| c == 0).unwrap_or(b.len());
    String::from_utf8_lossy(&b[..end]).into_owned()
}

fn put_cstr(dst: &mut [u8], s: &str) {
    let n = s.len().min(dst.len() - 1);
    dst[..n].copy_from_slice(&s.as_bytes()[..n]);
}

impl NiftiImage {
    pub fn new(geom: Geometry, data: VoxelData) -> Result<Self> {
        if data.len() != geom.len() {
            return Err(Error::InvalidVolume(format!(
                "{} voxels for shape {:?}",
                data.len(),
                geom.shape
            )));
        }
        Ok(Self {
            geom,
            data,
            intent_name: String::new(),
            descrip: String::new(),
        })
    }

    pub fn datatype(&self) -> Datatype {
        self.data.datatype()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_SIZE {
            return Err(Error::MalformedHeader(format!(
                "file is {} bytes, shorter than the {HEADER_SIZE}-byte header",
                bytes.len()
            )));
        }
        let sizeof_hdr = read_i32(bytes, 0);
        if sizeof_hdr != HEADER_SIZE as i32 {
            return Err(Error::MalformedHeader(format!(
                "sizeof_hdr is {sizeof_hdr}, expected {HEADER_SIZE} (little-endian)"
            )));
        }
        if &bytes[344..348] != MAGIC {
            return Err(Error::MalformedHeader(format!(
                "magic {:?} is not \"n+1\\0\"",
                &bytes[344..348]
            )));
        }
        let dim: Vec<i16> = (0..8).map(|i| read_i16(bytes, 40 + 2 * i)).collect();
        if dim[0] != 3 {
            return Err(Error::MalformedHeader(format!(
                "dim[0] is {}, only 3D images are supported",
                dim[0]
            )));
        }
        if dim[1..4].iter().any(|&d| d < 1) {
            return Err(Error::MalformedHeader(format!(
                "non-positive dimensions {:?}",
                &dim[1..4]
            )));
        }
        let datatype = Datatype::from_code(read_i16(bytes, 70))?;
        let pixdim: Vec<f32> = (0..8).map(|i| read_f32(bytes, 76 + 4 * i)).collect();
        let vox_offset = read_f32(bytes, 108);
        if !(vox_offset.is_finite() && vox_offset >= VOX_OFFSET as f32 && vox_offset.fract() == 0.0) {
            return Err(Error::MalformedHeader(format!(
                "vox_offset {vox_offset} is not an integer >= {VOX_OFFSET}"
            )));
        }
        let shape = [dim[1] as usize, dim[2] as usize, dim[3] as usize];
        let spacing = [pixdim[1] as f64, pixdim[2] as f64, pixdim[3] as f64];
        let geom = Geometry::new(shape, spacing)
            .map_err(|e| Error::MalformedHeader(format!("pixdim: {e}")))?;

        let start = vox_offset as usize;
        let expected = geom.len() * datatype.bytes_per_voxel();
        let available = bytes.len().saturating_sub(start);
        if available < expected {
            return Err(Error::TruncatedData {
                expected,
                found: available,
            });
        }
        let data = VoxelData::from_le_bytes(datatype, &bytes[start..start + expected]);
        Ok(Self {
            geom,
            data,
            intent_name: read_cstr(&bytes[328..344]),
            descrip: read_cstr(&bytes[148..228]),
        })
    }

    /// Serialises header, 4-byte empty extension block, then voxel data.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.geom.shape.iter().any(|&d| d > i16::MAX as usize) {
            return Err(Error::InvalidVolume(format!(
                "shape {:?} exceeds the NIfTI-1 dimension limit",
                self.geom.shape
            )));
        }
        let datatype = self.datatype();
        let mut h = vec![0u8; VOX_OFFSET];
        h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
        h[38] = b'r';
        let dims: [i16; 8] = [
            3,
            self.geom.shape[0] as i16,
            self.geom.shape[1] as i16,
            self.geom.shape[2] as i16,
            1,
            1,
            1,
            1,
        ];
        for (i, d) in dims.iter().enumerate() {
            h[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
        }
        h[70..72].copy_from_slice(&datatype.code().to_le_bytes());
        let bitpix = (datatype.bytes_per_voxel() * 8) as i16;
        h[72..74].copy_from_slice(&bitpix.to_le_bytes());
        let pixdim: [f32; 8] = [
            1.0,
            self.geom.spacing[0] as f32,
            self.geom.spacing[1] as f32,
            self.geom.spacing[2] as f32,
            1.0,
            1.0,
            1.0,
            1.0,
        ];
        for (i, p) in pixdim.iter().enumerate() {
            h[76 + 4 * i..80 + 4 * i].copy_from_slice(&p.to_le_bytes());
        }
        h[108..112].copy_from_slice(&(VOX_OFFSET as f32).to_le_bytes());
        h[112..116].copy_from_slice(&1.0f32.to_le_bytes());
        // xyzt_units: millimetres
        h[123] = 2;
        put_cstr(&mut h[148..228], &self.descrip);
        put_cstr(&mut h[328..344], &self.intent_name);
        h[344..348].copy_from_slice(MAGIC);

        let mut out = h;
        out.extend(self.data.to_le_bytes());
        Ok(out)
    }

    /// Raw data section exactly as stored on disk.
    pub fn data_bytes(&self) -> Vec<u8> {
        self.data.to_le_bytes()
    }

    /// Converts any stored type to a float32 intensity volume.
    pub fn to_volume(&self) -> Result<Volume> {
        let data = match &self.data {
            VoxelData::F32(v) => v.clone(),
            VoxelData::U8(v) => v.iter().map(|&x| x as f32).collect(),
            VoxelData::I16(v) => v.iter().map(|&x| x as f32).collect(),
        };
        Grid::new(self.geom, data)
    }

    /// Interprets the voxels as class IDs. Values must be non-negative
    /// integers; `num_classes` defaults to `max + 1`.
    pub fn to_labels(&self, num_classes: Option<u16>) -> Result<LabelVolume> {
        let grid = self.to_u16_grid()?;
        match num_classes {
            Some(n) => LabelVolume::new(grid, n),
            None => Ok(LabelVolume::infer_classes(grid)),
        }
    }

    pub(crate) fn to_u16_grid(&self) -> Result<Grid<u16>> {
        let vals = self.data.as_f64();
        let mut data = Vec::with_capacity(vals.len());
        for v in vals {
            if !(v >= 0.0 && v <= u16::MAX as f64 && v.fract() == 0.0) {
                return Err(Error::InvalidVolume(format!(
                    "value {v} is not a valid class ID"
                )));
            }
            data.push(v as u16);
        }
        Grid::new(self.geom, data)
    }

    /// Interprets the voxels as a binary mask; only 0 and 1 are accepted.
    pub fn to_binary(&self) -> Result<BinaryVolume> {
        let vals = self.data.as_f64();
        let mut data = Vec::with_capacity(vals.len());
        for v in vals {
            if v == 0.0 {
                data.push(false);
            } else if v == 1.0 {
                data.push(true);
            } else {
                return Err(Error::InvalidVolume(format!("binary mask contains {v}")));
            }
        }
        Grid::new(self.geom, data)
    }

    /// Reads a probability volume, unstacking channels recorded in
    /// `intent_name`; an untagged image is a single channel.
    pub fn to_prob(&self) -> Result<ProbVolume> {
        let channels = match self.intent_name.strip_prefix(CHANNELS_INTENT) {
            Some(n) => n
                .parse::<usize>()
                .map_err(|_| Error::MalformedHeader(format!("bad intent_name {:?}", self.intent_name)))?,
            None => 1,
        };
        let [nx, ny, nz] = self.geom.shape;
        if channels == 0 || nz % channels != 0 {
            return Err(Error::MalformedHeader(format!(
                "{channels} channels do not divide z extent {nz}"
            )));
        }
        let geom = Geometry::new([nx, ny, nz / channels], self.geom.spacing)?;
        let data = self.data.as_f64();
        ProbVolume::new(geom, channels, data)
    }
}

/// Conversion into a writable image.
pub trait ToNifti {
    fn to_nifti(&self) -> Result<NiftiImage>;
}

impl ToNifti for NiftiImage {
    fn to_nifti(&self) -> Result<NiftiImage> {
        Ok(self.clone())
    }
}

impl ToNifti for Volume {
    fn to_nifti(&self) -> Result<NiftiImage> {
        NiftiImage::new(*self.geometry(), VoxelData::F32(self.data().to_vec()))
    }
}

impl ToNifti for BinaryVolume {
    fn to_nifti(&self) -> Result<NiftiImage> {
        NiftiImage::new(
            *self.geometry(),
            VoxelData::U8(self.data().iter().map(|&b| b as u8).collect()),
        )
    }
}

impl ToNifti for LabelVolume {
    /// uint8 when every class ID fits, int16 otherwise.
    fn to_nifti(&self) -> Result<NiftiImage> {
        let geom = *self.geometry();
        let data = if self.num_classes() <= 256 {
            VoxelData::U8(self.data().iter().map(|&v| v as u8).collect())
        } else if self.num_classes() as usize <= i16::MAX as usize + 1 {
            VoxelData::I16(self.data().iter().map(|&v| v as i16).collect())
        } else {
            return Err(Error::InvalidVolume(format!(
                "{} classes do not fit in int16",
                self.num_classes()
            )));
        };
        NiftiImage::new(geom, data)
    }
}

impl ToNifti for ChannelVolume {
    fn to_nifti(&self) -> Result<NiftiImage> {
        let [nx, ny, nz] = self.shape();
        let geom = Geometry::new([nx, ny, nz * self.channels()], self.geometry().spacing)?;
        let mut img = NiftiImage::new(
            geom,
            VoxelData::F32(self.data().iter().map(|&v| v as f32).collect()),
        )?;
        if self.channels() > 1 {
            img.intent_name = format!("{CHANNELS_INTENT}{}", self.channels());
        }
        Ok(img)
    }
}

impl ToNifti for ProbVolume {
    fn to_nifti(&self) -> Result<NiftiImage> {
        self.as_channels().to_nifti()
    }
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<NiftiImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    NiftiImage::from_bytes(&bytes)
}

pub fn write_nifti(image: &impl ToNifti, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = image.to_nifti()?.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    read_nifti(path)?.to_volume()
}

pub fn read_labels(path: impl AsRef<Path>, num_classes: Option<u16>) -> Result<LabelVolume> {
    read_nifti(path)?.to_labels(num_classes)
}

pub fn read_binary(path: impl AsRef<Path>) -> Result<BinaryVolume> {
    read_nifti(path)?.to_binary()
}

pub fn read_prob(path: impl AsRef<Path>) -> Result<ProbVolume> {
    read_nifti(path)?.to_prob()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header_bytes(img: &NiftiImage) -> Vec<u8> {
        img.to_bytes().unwrap()
    }

    #[test]
    fn zeros_float32_with_anisotropic_pixdim() {
        let geom = Geometry::new([4, 4, 4], [1.5, 1.5, 6.0]).unwrap();
        let vol = Volume::filled(geom, 0.0);
        let bytes = vol.to_nifti().unwrap().to_bytes().unwrap();
        assert_eq!(bytes.len(), VOX_OFFSET + 64 * 4);
        let back = NiftiImage::from_bytes(&bytes).unwrap().to_volume().unwrap();
        assert_eq!(back.shape(), [4, 4, 4]);
        assert_eq!(back.spacing(), [1.5, 1.5, 6.0]);
        assert!(back.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn header_layout() {
        let geom = Geometry::new([3, 2, 5], [0.5, 0.75, 3.0]).unwrap();
        let img = NiftiImage::new(geom, VoxelData::I16(vec![-7; 30])).unwrap();
        let b = header_bytes(&img);
        assert_eq!(read_i32(&b, 0), 348);
        assert_eq!(&b[344..348], b"n+1\0");
        assert_eq!(read_i16(&b, 40), 3);
        assert_eq!(read_i16(&b, 42), 3);
        assert_eq!(read_i16(&b, 44), 2);
        assert_eq!(read_i16(&b, 46), 5);
        assert_eq!(read_i16(&b, 70), 4);
        assert_eq!(read_i16(&b, 72), 16);
        assert_eq!(read_f32(&b, 80), 0.5);
        assert_eq!(read_f32(&b, 108), 352.0);
        assert_eq!(&b[348..352], &[0, 0, 0, 0]);
        assert_eq!(read_i16(&b, 352), -7);
    }

    #[test]
    fn two_dimensional_header_is_malformed() {
        let geom = Geometry::isotropic([2, 2, 1]);
        let mut b = header_bytes(&NiftiImage::new(geom, VoxelData::U8(vec![1; 4])).unwrap());
        b[40..42].copy_from_slice(&2i16.to_le_bytes());
        assert!(matches!(NiftiImage::from_bytes(&b), Err(Error::MalformedHeader(_))));
    }

    #[test]
    fn bad_magic_size_and_datatype() {
        let geom = Geometry::isotropic([2, 2, 2]);
        let good = header_bytes(&NiftiImage::new(geom, VoxelData::U8(vec![1; 8])).unwrap());

        let mut b = good.clone();
        b[344..348].copy_from_slice(b"ni1\0");
        assert!(matches!(NiftiImage::from_bytes(&b), Err(Error::MalformedHeader(_))));

        let mut b = good.clone();
        b[0..4].copy_from_slice(&540i32.to_le_bytes());
        assert!(matches!(NiftiImage::from_bytes(&b), Err(Error::MalformedHeader(_))));

        let mut b = good.clone();
        b[70..72].copy_from_slice(&64i16.to_le_bytes());
        assert!(matches!(NiftiImage::from_bytes(&b), Err(Error::UnsupportedDatatype(64))));

        assert!(matches!(NiftiImage::from_bytes(&good[..100]), Err(Error::MalformedHeader(_))));

        let b = &good[..good.len() - 1];
        assert!(matches!(
            NiftiImage::from_bytes(b),
            Err(Error::TruncatedData { expected: 8, found: 7 })
        ));
    }

    #[test]
    fn labels_pick_compact_datatype() {
        let geom = Geometry::isotropic([2, 1, 1]);
        let small = LabelVolume::from_vec(geom, vec![0, 3], 4).unwrap();
        assert_eq!(small.to_nifti().unwrap().datatype(), Datatype::U8);
        let big = LabelVolume::from_vec(geom, vec![0, 300], 301).unwrap();
        let img = big.to_nifti().unwrap();
        assert_eq!(img.datatype(), Datatype::I16);
        assert_eq!(img.to_labels(Some(301)).unwrap(), big);
    }

    #[test]
    fn label_conversion_rejects_negative_and_fractional() {
        let geom = Geometry::isotropic([2, 1, 1]);
        let img = NiftiImage::new(geom, VoxelData::I16(vec![0, -1])).unwrap();
        assert!(img.to_labels(None).is_err());
        let img = NiftiImage::new(geom, VoxelData::F32(vec![0.0, 1.5])).unwrap();
        assert!(img.to_labels(None).is_err());
        let img = NiftiImage::new(geom, VoxelData::U8(vec![0, 2])).unwrap();
        assert!(img.to_binary().is_err());
    }

    #[test]
    fn prob_volume_channels_stack_along_z() {
        let geom = Geometry::new([2, 1, 2], [1.0, 1.0, 3.0]).unwrap();
        let p = ProbVolume::new(geom, 2, vec![0.25, 0.5, 1.0, 0.0, 0.75, 0.5, 0.0, 1.0]).unwrap();
        let img = p.to_nifti().unwrap();
        assert_eq!(img.geom.shape, [2, 1, 4]);
        assert_eq!(img.intent_name, "channels:2");
        let back = NiftiImage::from_bytes(&img.to_bytes().unwrap()).unwrap().to_prob().unwrap();
        assert_eq!(back, p);
    }
}
