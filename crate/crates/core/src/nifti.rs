//! NIfTI-1 reader and writer.
//!
//! Reads single-file (`n+1`) and paired (`ni1`, `.hdr`/`.img`) volumes in
//! either byte order, optionally gzip-compressed. Writes single-file float32
//! in native byte order with `sform_code = 2` and a mirrored qform.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ByteOrder, LittleEndian, NativeEndian};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::error::{Error, Result};
use crate::geometry::AffineTransform;
use crate::volume::{GridSpec, Volume3D};

pub const HEADER_SIZE: usize = 348;
const SINGLE_FILE_VOX_OFFSET: usize = 352;
const XFORM_ALIGNED_ANAT: i16 = 2;
const UNITS_MM: u8 = 2;
const UNITS_PREFIX: &str = "units=";

mod offset {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const DESCRIP: usize = 148;
    pub const QFORM_CODE: usize = 252;
    pub const SFORM_CODE: usize = 254;
    pub const QUATERN_B: usize = 256;
    pub const QOFFSET_X: usize = 268;
    pub const SROW_X: usize = 280;
    pub const MAGIC: usize = 344;
}

/// Supported on-disk voxel types.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataType {
    Uint8,
    Int16,
    Int32,
    Float32,
    Float64,
}

impl DataType {
    pub fn from_code(code: i16) -> Result<Self> {
        match code {
            2 => Ok(Self::Uint8),
            4 => Ok(Self::Int16),
            8 => Ok(Self::Int32),
            16 => Ok(Self::Float32),
            64 => Ok(Self::Float64),
            other => Err(Error::UnsupportedDatatype(other)),
        }
    }

    pub fn code(self) -> i16 {
        match self {
            Self::Uint8 => 2,
            Self::Int16 => 4,
            Self::Int32 => 8,
            Self::Float32 => 16,
            Self::Float64 => 64,
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            Self::Uint8 => 1,
            Self::Int16 => 2,
            Self::Int32 | Self::Float32 => 4,
            Self::Float64 => 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Endian {
    Little,
    Big,
}

/// Parsed subset of the header that drives decoding.
#[derive(Debug, Clone)]
struct Header {
    endian: Endian,
    single_file: bool,
    dims: [usize; 3],
    datatype: DataType,
    pixdim: [f32; 8],
    vox_offset: usize,
    scl_slope: f32,
    scl_inter: f32,
    descrip: String,
    qform_code: i16,
    sform_code: i16,
    quatern: [f32; 3],
    qoffset: [f32; 3],
    srow: [[f32; 4]; 3],
}

struct Reader<'a> {
    buf: &'a [u8],
    endian: Endian,
}

impl Reader<'_> {
    fn i16(&self, at: usize) -> i16 {
        match self.endian {
            Endian::Little => LittleEndian::read_i16(&self.buf[at..]),
            Endian::Big => BigEndian::read_i16(&self.buf[at..]),
        }
    }

    fn i32(&self, at: usize) -> i32 {
        match self.endian {
            Endian::Little => LittleEndian::read_i32(&self.buf[at..]),
            Endian::Big => BigEndian::read_i32(&self.buf[at..]),
        }
    }

    fn f32(&self, at: usize) -> f32 {
        match self.endian {
            Endian::Little => LittleEndian::read_f32(&self.buf[at..]),
            Endian::Big => BigEndian::read_f32(&self.buf[at..]),
        }
    }

    fn f64(&self, at: usize) -> f64 {
        match self.endian {
            Endian::Little => LittleEndian::read_f64(&self.buf[at..]),
            Endian::Big => BigEndian::read_f64(&self.buf[at..]),
        }
    }
}

fn parse_header(buf: &[u8]) -> Result<Header> {
    if buf.len() < HEADER_SIZE {
        return Err(Error::format(
            "sizeof_hdr",
            format!("file holds {} bytes, fewer than the {HEADER_SIZE}-byte header", buf.len()),
        ));
    }
    let endian = if LittleEndian::read_i32(buf) == HEADER_SIZE as i32 {
        Endian::Little
    } else if BigEndian::read_i32(buf) == HEADER_SIZE as i32 {
        Endian::Big
    } else {
        return Err(Error::format(
            "sizeof_hdr",
            format!(
                "expected 348 in either byte order, found {} (NIfTI-2 and non-NIfTI files are not supported)",
                LittleEndian::read_i32(buf)
            ),
        ));
    };
    let r = Reader { buf, endian };
    debug_assert_eq!(r.i32(offset::SIZEOF_HDR), HEADER_SIZE as i32);

    let magic = &buf[offset::MAGIC..offset::MAGIC + 4];
    let single_file = match magic {
        b"n+1\0" => true,
        b"ni1\0" => false,
        _ => {
            return Err(Error::format(
                "magic",
                format!(
                    "expected \"n+1\" or \"ni1\", found {:?} (ANALYZE 7.5 is not supported; convert to NIfTI-1)",
                    String::from_utf8_lossy(magic)
                ),
            ))
        }
    };

    let ndim = r.i16(offset::DIM);
    if !(1..=7).contains(&ndim) {
        return Err(Error::format("dim", format!("dim[0] must be in 1..=7, found {ndim}")));
    }
    let mut dims = [1usize; 3];
    for d in 1..=ndim as usize {
        let v = r.i16(offset::DIM + 2 * d);
        if v < 1 {
            return Err(Error::format("dim", format!("dim[{d}] = {v} is not positive")));
        }
        if d <= 3 {
            dims[d - 1] = v as usize;
        } else if v != 1 {
            return Err(Error::format(
                "dim",
                format!("dim[{d}] = {v}: only 3-D volumes are supported"),
            ));
        }
    }

    let datatype = DataType::from_code(r.i16(offset::DATATYPE))?;
    let bitpix = r.i16(offset::BITPIX);
    if bitpix as usize != datatype.bytes() * 8 {
        return Err(Error::format(
            "bitpix",
            format!("bitpix {bitpix} inconsistent with datatype {:?}", datatype),
        ));
    }

    let mut pixdim = [0f32; 8];
    for (i, p) in pixdim.iter_mut().enumerate() {
        *p = r.f32(offset::PIXDIM + 4 * i);
    }
    for (d, p) in pixdim.iter().enumerate().take(4).skip(1) {
        if !(p.is_finite() && *p > 0.0) {
            return Err(Error::format("pixdim", format!("pixdim[{d}] = {p} is not a positive spacing")));
        }
    }

    let vox_offset_raw = r.f32(offset::VOX_OFFSET);
    let vox_offset = if single_file {
        if !(vox_offset_raw.is_finite() && vox_offset_raw >= HEADER_SIZE as f32) {
            return Err(Error::format(
                "vox_offset",
                format!("single-file vox_offset {vox_offset_raw} must be at least {HEADER_SIZE}"),
            ));
        }
        vox_offset_raw as usize
    } else {
        if !(vox_offset_raw.is_finite() && vox_offset_raw >= 0.0) {
            return Err(Error::format("vox_offset", format!("negative vox_offset {vox_offset_raw}")));
        }
        vox_offset_raw as usize
    };

    let descrip_bytes = &buf[offset::DESCRIP..offset::DESCRIP + 80];
    let end = descrip_bytes.iter().position(|&b| b == 0).unwrap_or(80);
    let descrip = String::from_utf8_lossy(&descrip_bytes[..end]).into_owned();

    let mut srow = [[0f32; 4]; 3];
    for (row, vals) in srow.iter_mut().enumerate() {
        for (c, v) in vals.iter_mut().enumerate() {
            *v = r.f32(offset::SROW_X + 16 * row + 4 * c);
        }
    }

    Ok(Header {
        endian,
        single_file,
        dims,
        datatype,
        pixdim,
        vox_offset,
        scl_slope: r.f32(offset::SCL_SLOPE),
        scl_inter: r.f32(offset::SCL_INTER),
        descrip,
        qform_code: r.i16(offset::QFORM_CODE),
        sform_code: r.i16(offset::SFORM_CODE),
        quatern: [
            r.f32(offset::QUATERN_B),
            r.f32(offset::QUATERN_B + 4),
            r.f32(offset::QUATERN_B + 8),
        ],
        qoffset: [
            r.f32(offset::QOFFSET_X),
            r.f32(offset::QOFFSET_X + 4),
            r.f32(offset::QOFFSET_X + 8),
        ],
        srow,
    })
}

impl Header {
    fn affine(&self) -> Result<AffineTransform> {
        if self.sform_code > 0 {
            let mut m = Matrix4::identity();
            for r in 0..3 {
                for c in 0..4 {
                    m[(r, c)] = self.srow[r][c] as f64;
                }
            }
            return AffineTransform::new(m)
                .map_err(|e| Error::format("srow_x", format!("sform is unusable: {e}")));
        }
        let spacing = [
            self.pixdim[1] as f64,
            self.pixdim[2] as f64,
            self.pixdim[3] as f64,
        ];
        if self.qform_code > 0 {
            let [b, c, d] = self.quatern.map(|v| v as f64);
            let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
            let rot = Matrix3::new(
                a * a + b * b - c * c - d * d,
                2.0 * (b * c - a * d),
                2.0 * (b * d + a * c),
                2.0 * (b * c + a * d),
                a * a + c * c - b * b - d * d,
                2.0 * (c * d - a * b),
                2.0 * (b * d - a * c),
                2.0 * (c * d + a * b),
                a * a + d * d - c * c - b * b,
            );
            let qfac = if self.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
            let scale = Matrix3::from_diagonal(&Vector3::new(spacing[0], spacing[1], qfac * spacing[2]));
            let offset = Vector3::new(
                self.qoffset[0] as f64,
                self.qoffset[1] as f64,
                self.qoffset[2] as f64,
            );
            return AffineTransform::new(
                *AffineTransform::from_linear_and_offset(rot * scale, offset).matrix(),
            )
            .map_err(|e| Error::format("quatern_b", format!("qform is unusable: {e}")));
        }
        Ok(AffineTransform::scaling(spacing))
    }

    fn units(&self) -> String {
        self.descrip
            .strip_prefix(UNITS_PREFIX)
            .map(str::to_string)
            .unwrap_or_else(|| "arbitrary".into())
    }
}

fn decode_voxels(h: &Header, bytes: &[u8]) -> Result<Vec<f64>> {
    let n = h.dims[0] * h.dims[1] * h.dims[2];
    let need = n * h.datatype.bytes();
    if bytes.len() < need {
        return Err(Error::format(
            "vox_offset",
            format!("voxel data truncated: need {need} bytes, found {}", bytes.len()),
        ));
    }
    let r = Reader {
        buf: bytes,
        endian: h.endian,
    };
    let raw: Vec<f64> = match h.datatype {
        DataType::Uint8 => bytes[..n].iter().map(|&b| b as f64).collect(),
        DataType::Int16 => (0..n).map(|i| r.i16(2 * i) as f64).collect(),
        DataType::Int32 => (0..n).map(|i| r.i32(4 * i) as f64).collect(),
        DataType::Float32 => (0..n).map(|i| r.f32(4 * i) as f64).collect(),
        DataType::Float64 => (0..n).map(|i| r.f64(8 * i)).collect(),
    };
    let slope = h.scl_slope as f64;
    let inter = h.scl_inter as f64;
    if slope != 0.0 && slope.is_finite() && inter.is_finite() && !(slope == 1.0 && inter == 0.0) {
        Ok(raw.into_iter().map(|v| v * slope + inter).collect())
    } else {
        Ok(raw)
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(&bytes[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

fn paired_image_path(hdr: &Path) -> Option<PathBuf> {
    let name = hdr.file_name()?.to_str()?;
    let candidates: Vec<String> = if let Some(stem) = name.strip_suffix(".hdr.gz") {
        vec![format!("{stem}.img.gz"), format!("{stem}.img")]
    } else {
        let stem = name.strip_suffix(".hdr")?;
        vec![format!("{stem}.img"), format!("{stem}.img.gz")]
    };
    candidates.into_iter().map(|c| hdr.with_file_name(c)).find(|p| p.exists())
}

/// Decodes an in-memory single-file NIfTI-1 image (already decompressed).
pub fn decode_nifti(bytes: &[u8]) -> Result<Volume3D> {
    let h = parse_header(bytes)?;
    if !h.single_file {
        return Err(Error::format(
            "magic",
            "\"ni1\" header requires a paired .img file; decode from a path instead",
        ));
    }
    let data = decode_voxels(&h, bytes.get(h.vox_offset..).unwrap_or(&[]))?;
    let grid = GridSpec::new(h.dims, h.affine()?)?;
    Volume3D::new(grid, data, h.units())
}

pub fn read_nifti(path: &Path) -> Result<Volume3D> {
    let bytes = read_maybe_gz(path)?;
    let h = parse_header(&bytes)?;
    if h.single_file {
        return decode_nifti(&bytes);
    }
    let img_path = paired_image_path(path).ok_or_else(|| {
        Error::format(
            "magic",
            format!("\"ni1\" header {} has no paired .img file", path.display()),
        )
    })?;
    let img = read_maybe_gz(&img_path)?;
    let data = decode_voxels(&h, img.get(h.vox_offset..).unwrap_or(&[]))?;
    let grid = GridSpec::new(h.dims, h.affine()?)?;
    Volume3D::new(grid, data, h.units())
}

/// Nearest proper rotation to `m` (polar decomposition).
fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut u2 = u;
        for i in 0..3 {
            u2[(i, 2)] = -u2[(i, 2)];
        }
        r = u2 * vt;
    }
    r
}

/// Returns (b, c, d, qfac) for the rotation part of the affine.
fn quaternion_from_affine(aff: &AffineTransform, spacing: [f64; 3]) -> ([f64; 3], f64) {
    let mut lin = aff.linear();
    for c in 0..3 {
        for r in 0..3 {
            lin[(r, c)] /= spacing[c];
        }
    }
    let qfac = if lin.determinant() < 0.0 {
        for r in 0..3 {
            lin[(r, 2)] = -lin[(r, 2)];
        }
        -1.0
    } else {
        1.0
    };
    let r = nearest_rotation(&lin);
    let (r11, r12, r13) = (r[(0, 0)], r[(0, 1)], r[(0, 2)]);
    let (r21, r22, r23) = (r[(1, 0)], r[(1, 1)], r[(1, 2)]);
    let (r31, r32, r33) = (r[(2, 0)], r[(2, 1)], r[(2, 2)]);
    let trace = r11 + r22 + r33 + 1.0;
    let (a, mut b, mut c, mut d);
    if trace > 0.5 {
        a = 0.5 * trace.sqrt();
        b = 0.25 * (r32 - r23) / a;
        c = 0.25 * (r13 - r31) / a;
        d = 0.25 * (r21 - r12) / a;
    } else {
        let xd = 1.0 + r11 - (r22 + r33);
        let yd = 1.0 + r22 - (r11 + r33);
        let zd = 1.0 + r33 - (r11 + r22);
        if xd > 1.0 {
            b = 0.5 * xd.sqrt();
            c = 0.25 * (r12 + r21) / b;
            d = 0.25 * (r13 + r31) / b;
            a = 0.25 * (r32 - r23) / b;
        } else if yd > 1.0 {
            c = 0.5 * yd.sqrt();
            b = 0.25 * (r12 + r21) / c;
            d = 0.25 * (r23 + r32) / c;
            a = 0.25 * (r13 - r31) / c;
        } else {
            d = 0.5 * zd.sqrt();
            b = 0.25 * (r13 + r31) / d;
            c = 0.25 * (r23 + r32) / d;
            a = 0.25 * (r21 - r12) / d;
        }
        if a < 0.0 {
            b = -b;
            c = -c;
            d = -d;
        }
    }
    ([b, c, d], qfac)
}

/// Serializes a volume as single-file float32 NIfTI-1 bytes (uncompressed).
pub fn encode_nifti(vol: &Volume3D) -> Vec<u8> {
    type E = NativeEndian;
    let mut hdr = vec![0u8; SINGLE_FILE_VOX_OFFSET];
    let [nx, ny, nz] = vol.dims();
    let spacing = vol.spacing();
    let aff = vol.affine();

    E::write_i32(&mut hdr[offset::SIZEOF_HDR..], HEADER_SIZE as i32);
    let dim: [i16; 8] = [3, nx as i16, ny as i16, nz as i16, 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        E::write_i16(&mut hdr[offset::DIM + 2 * i..], *d);
    }
    E::write_i16(&mut hdr[offset::DATATYPE..], DataType::Float32.code());
    E::write_i16(&mut hdr[offset::BITPIX..], 32);

    let (quat, qfac) = quaternion_from_affine(aff, spacing);
    let pixdim = [qfac, spacing[0], spacing[1], spacing[2], 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        E::write_f32(&mut hdr[offset::PIXDIM + 4 * i..], *p as f32);
    }
    E::write_f32(&mut hdr[offset::VOX_OFFSET..], SINGLE_FILE_VOX_OFFSET as f32);
    E::write_f32(&mut hdr[offset::SCL_SLOPE..], 1.0);
    E::write_f32(&mut hdr[offset::SCL_INTER..], 0.0);
    hdr[offset::XYZT_UNITS] = UNITS_MM;

    let descrip = format!("{UNITS_PREFIX}{}", vol.units());
    let db = descrip.as_bytes();
    let n = db.len().min(79);
    hdr[offset::DESCRIP..offset::DESCRIP + n].copy_from_slice(&db[..n]);

    E::write_i16(&mut hdr[offset::QFORM_CODE..], XFORM_ALIGNED_ANAT);
    E::write_i16(&mut hdr[offset::SFORM_CODE..], XFORM_ALIGNED_ANAT);
    for (i, q) in quat.iter().enumerate() {
        E::write_f32(&mut hdr[offset::QUATERN_B + 4 * i..], *q as f32);
    }
    let off = aff.offset();
    for i in 0..3 {
        E::write_f32(&mut hdr[offset::QOFFSET_X + 4 * i..], off[i] as f32);
    }
    let rows = aff.rows();
    for (r, row) in rows.iter().take(3).enumerate() {
        for (c, v) in row.iter().enumerate() {
            E::write_f32(&mut hdr[offset::SROW_X + 16 * r + 4 * c..], *v as f32);
        }
    }
    hdr[offset::MAGIC..offset::MAGIC + 4].copy_from_slice(b"n+1\0");
    // bytes 348..352: empty extension flag, already zero

    let mut out = hdr;
    out.reserve(vol.data().len() * 4);
    let mut word = [0u8; 4];
    for &v in vol.data() {
        E::write_f32(&mut word, v as f32);
        out.extend_from_slice(&word);
    }
    out
}

pub(crate) fn is_gz_path(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("gz"))
}

/// File bytes as they would be written to `path` (gzip when it ends in `.gz`).
pub(crate) fn encode_for_path(vol: &Volume3D, path: &Path) -> Result<Vec<u8>> {
    let raw = encode_nifti(vol);
    if is_gz_path(path) {
        let mut enc = GzEncoder::new(Vec::new(), Compression::fast());
        enc.write_all(&raw).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))
    } else {
        Ok(raw)
    }
}

pub fn write_nifti(vol: &Volume3D, path: &Path) -> Result<()> {
    let bytes = encode_for_path(vol, path)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Like [`write_nifti`] but refuses to replace an existing file.
pub fn write_nifti_new(vol: &Volume3D, path: &Path) -> Result<()> {
    let bytes = encode_for_path(vol, path)?;
    crate::util::write_new(path, &bytes)
}
