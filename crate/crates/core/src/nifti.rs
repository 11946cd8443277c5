//! NIfTI-1 single-file (.nii / .nii.gz) reading and writing.
//!
//! The reader accepts little- and big-endian headers (endianness is sniffed
//! from the `dim[0]` field), honors `scl_slope` / `scl_inter`, and
//! transparently decompresses gzip input (detected by the 0x1F 0x8B
//! prefix, not the file name). The writer always emits uncompressed
//! little-endian float32 with identity scaling, so a write→read cycle
//! reproduces float32 voxel data bit-exactly.
//!
//! Only the first three dimensions are supported; higher-dimensional
//! headers are accepted when the extra dimensions have size 1. Orientation
//! fields (qform/sform) are carried through verbatim and never
//! interpreted. Header floats are stored at f32 precision on disk.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::bufread::MultiGzDecoder;
use ndarray::Array3;

use crate::error::{Error, Result};
use crate::volume::{Orientation, ValueKind, Volume, VolumeGeometry};

const HEADER_SIZE: usize = 348;
/// Standard data offset for single-file NIfTI-1 (header + 4 pad bytes).
const VOX_OFFSET: usize = 352;
const MAGIC_SINGLE: &[u8; 4] = b"n+1\0";

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;

/// Header facts needed without loading voxel data (manifest validation).
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeaderInfo {
    /// (nx, ny, nz).
    pub dims: (usize, usize, usize),
    /// (sx, sy, sz) in mm.
    pub spacing: (f64, f64, f64),
    /// Raw NIfTI datatype code.
    pub datatype: i16,
}

struct ParsedHeader {
    dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
    orientation: Orientation,
    datatype: i16,
    vox_offset: u64,
    scl_slope: f64,
    scl_inter: f64,
    little_endian: bool,
}

fn elem_size(datatype: i16) -> usize {
    match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        _ => unreachable!("datatype validated during parse"),
    }
}

/// Opens `path` and layers a gzip decoder on top when the content starts
/// with the gzip magic bytes.
fn open_reader(path: &Path) -> Result<Box<dyn Read>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let head = reader.fill_buf().map_err(|e| Error::io(path, e))?;
    let gz = head.len() >= 2 && head[0] == 0x1F && head[1] == 0x8B;
    Ok(if gz {
        Box::new(MultiGzDecoder::new(reader))
    } else {
        Box::new(reader)
    })
}

fn parse_header(bytes: &[u8; HEADER_SIZE], path: &Path) -> Result<ParsedHeader> {
    // Endianness sniff: dim[0] (number of dimensions) must be in 1..=7.
    let ndim_le = LittleEndian::read_i16(&bytes[40..42]);
    let ndim_be = BigEndian::read_i16(&bytes[40..42]);
    let little_endian = if (1..=7).contains(&ndim_le) {
        true
    } else if (1..=7).contains(&ndim_be) {
        false
    } else {
        return Err(Error::format(
            path,
            format!("implausible dim[0] in either byte order ({ndim_le} LE / {ndim_be} BE)"),
        ));
    };
    if little_endian {
        parse_header_order::<LittleEndian>(bytes, path, true)
    } else {
        parse_header_order::<BigEndian>(bytes, path, false)
    }
}

fn parse_header_order<B: ByteOrder>(
    bytes: &[u8; HEADER_SIZE],
    path: &Path,
    little_endian: bool,
) -> Result<ParsedHeader> {
    let i16_at = |off: usize| B::read_i16(&bytes[off..off + 2]);
    let i32_at = |off: usize| B::read_i32(&bytes[off..off + 4]);
    let f32_at = |off: usize| B::read_f32(&bytes[off..off + 4]);

    let sizeof_hdr = i32_at(0);
    if sizeof_hdr != HEADER_SIZE as i32 {
        return Err(Error::format(
            path,
            format!("sizeof_hdr is {sizeof_hdr}, expected {HEADER_SIZE}"),
        ));
    }
    if &bytes[344..348] != MAGIC_SINGLE {
        return Err(Error::format(
            path,
            format!("magic bytes {:?} are not \"n+1\\0\"", &bytes[344..348]),
        ));
    }

    let ndim = i16_at(40) as usize;
    let dim_at = |d: usize| i16_at(40 + 2 * d);
    let mut dims = [1usize; 3];
    for d in 1..=ndim.min(3) {
        let v = dim_at(d);
        if v < 1 {
            return Err(Error::format(
                path,
                format!("dim[{d}] = {v} is not positive"),
            ));
        }
        dims[d - 1] = v as usize;
    }
    for d in 4..=ndim {
        if dim_at(d) > 1 {
            return Err(Error::format(
                path,
                format!(
                    "dimension {d} has size {}, only 3D volumes are supported",
                    dim_at(d)
                ),
            ));
        }
    }

    let datatype = i16_at(70);
    if !matches!(datatype, DT_UINT8 | DT_INT16 | DT_FLOAT32 | DT_FLOAT64) {
        return Err(Error::UnsupportedDatatype {
            path: path.to_path_buf(),
            code: datatype,
        });
    }

    let pixdim_at = |d: usize| f64::from(f32_at(76 + 4 * d));
    let mut spacing = [1.0f64; 3];
    for d in 1..=ndim.min(3) {
        let v = pixdim_at(d);
        if !v.is_finite() || v <= 0.0 {
            return Err(Error::format(
                path,
                format!("pixdim[{d}] = {v} is not positive"),
            ));
        }
        spacing[d - 1] = v;
    }

    let vox_offset_f = f32_at(108);
    if !vox_offset_f.is_finite() || vox_offset_f < HEADER_SIZE as f32 {
        return Err(Error::format(
            path,
            format!("vox_offset {vox_offset_f} precedes the header end"),
        ));
    }
    let vox_offset = vox_offset_f as u64;

    let orientation = Orientation {
        qform_code: i16_at(252),
        sform_code: i16_at(254),
        quatern: [
            f64::from(f32_at(256)),
            f64::from(f32_at(260)),
            f64::from(f32_at(264)),
        ],
        qoffset: [
            f64::from(f32_at(268)),
            f64::from(f32_at(272)),
            f64::from(f32_at(276)),
        ],
        srow: [
            [0, 4, 8, 12].map(|o| f64::from(f32_at(280 + o))),
            [0, 4, 8, 12].map(|o| f64::from(f32_at(296 + o))),
            [0, 4, 8, 12].map(|o| f64::from(f32_at(312 + o))),
        ],
        qfac: pixdim_at(0),
    };

    Ok(ParsedHeader {
        dims: (dims[0], dims[1], dims[2]),
        spacing: (spacing[0], spacing[1], spacing[2]),
        orientation,
        datatype,
        vox_offset,
        scl_slope: f64::from(f32_at(112)),
        scl_inter: f64::from(f32_at(116)),
        little_endian,
    })
}

fn read_header_from(reader: &mut dyn Read, path: &Path) -> Result<ParsedHeader> {
    let mut bytes = [0u8; HEADER_SIZE];
    reader
        .read_exact(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    parse_header(&bytes, path)
}

/// Reads only the header of a NIfTI-1 file (gzip transparent).
pub fn read_nifti_header(path: impl AsRef<Path>) -> Result<NiftiHeaderInfo> {
    let path = path.as_ref();
    let mut reader = open_reader(path)?;
    let header = read_header_from(reader.as_mut(), path)?;
    Ok(NiftiHeaderInfo {
        dims: header.dims,
        spacing: header.spacing,
        datatype: header.datatype,
    })
}

fn decode_payload(raw: &[u8], datatype: i16, little_endian: bool) -> Vec<f64> {
    let n = raw.len() / elem_size(datatype);
    let mut out = Vec::with_capacity(n);
    match (datatype, little_endian) {
        (DT_UINT8, _) => out.extend(raw.iter().map(|&b| f64::from(b))),
        (DT_INT16, true) => out.extend(
            raw.chunks_exact(2)
                .map(|c| f64::from(LittleEndian::read_i16(c))),
        ),
        (DT_INT16, false) => out.extend(
            raw.chunks_exact(2)
                .map(|c| f64::from(BigEndian::read_i16(c))),
        ),
        (DT_FLOAT32, true) => out.extend(
            raw.chunks_exact(4)
                .map(|c| f64::from(LittleEndian::read_f32(c))),
        ),
        (DT_FLOAT32, false) => out.extend(
            raw.chunks_exact(4)
                .map(|c| f64::from(BigEndian::read_f32(c))),
        ),
        (DT_FLOAT64, true) => out.extend(raw.chunks_exact(8).map(LittleEndian::read_f64)),
        (DT_FLOAT64, false) => out.extend(raw.chunks_exact(8).map(BigEndian::read_f64)),
        _ => unreachable!("datatype validated during parse"),
    }
    out
}

/// Reads a NIfTI-1 volume.
///
/// Voxels are scaled by `scl_slope` / `scl_inter` when the header carries a
/// nonzero slope. The result is tagged [`ValueKind::Raw`]; the caller
/// assigns modality semantics via [`Volume::reinterpret`].
pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let mut reader = open_reader(path)?;
    let header = read_header_from(reader.as_mut(), path)?;

    // Skip any extension bytes between the header and the voxel data.
    let skip = header.vox_offset - HEADER_SIZE as u64;
    std::io::copy(&mut reader.as_mut().take(skip), &mut std::io::sink())
        .map_err(|e| Error::io(path, e))
        .and_then(|copied| {
            if copied == skip {
                Ok(())
            } else {
                Err(Error::io(
                    path,
                    std::io::Error::new(
                        std::io::ErrorKind::UnexpectedEof,
                        "truncated before voxel data",
                    ),
                ))
            }
        })?;

    let (nx, ny, nz) = header.dims;
    let count = nx
        .checked_mul(ny)
        .and_then(|v| v.checked_mul(nz))
        .ok_or_else(|| Error::format(path, "voxel count overflows"))?;
    let mut raw = vec![0u8; count * elem_size(header.datatype)];
    reader
        .read_exact(&mut raw)
        .map_err(|e| Error::io(path, e))?;

    let mut values = decode_payload(&raw, header.datatype, header.little_endian);
    let apply_scaling = header.scl_slope != 0.0 && header.scl_slope.is_finite();
    if apply_scaling && (header.scl_slope != 1.0 || header.scl_inter != 0.0) {
        let inter = if header.scl_inter.is_finite() {
            header.scl_inter
        } else {
            0.0
        };
        for v in &mut values {
            *v = *v * header.scl_slope + inter;
        }
    }

    // NIfTI stores x fastest, so file order fills a [nz, ny, nx] C-order
    // array directly.
    let voxels =
        Array3::from_shape_vec((nz, ny, nx), values).expect("payload length checked against dims");
    let geometry = VolumeGeometry {
        dims: header.dims,
        spacing: header.spacing,
        orientation: header.orientation,
    };
    Volume::new(voxels, geometry, ValueKind::Raw)
}

fn encode_header(volume: &Volume) -> Result<[u8; VOX_OFFSET]> {
    let (nx, ny, nz) = volume.dims();
    for (name, d) in [("nx", nx), ("ny", ny), ("nz", nz)] {
        if d > i16::MAX as usize {
            return Err(Error::Dimension(format!(
                "{name} = {d} exceeds the NIfTI-1 dimension limit of {}",
                i16::MAX
            )));
        }
    }

    let mut h = [0u8; VOX_OFFSET];
    let put_i16 = |buf: &mut [u8; VOX_OFFSET], off: usize, v: i16| {
        LittleEndian::write_i16(&mut buf[off..off + 2], v)
    };
    let put_i32 = |buf: &mut [u8; VOX_OFFSET], off: usize, v: i32| {
        LittleEndian::write_i32(&mut buf[off..off + 4], v)
    };
    let put_f32 = |buf: &mut [u8; VOX_OFFSET], off: usize, v: f64| {
        LittleEndian::write_f32(&mut buf[off..off + 4], v as f32)
    };

    put_i32(&mut h, 0, HEADER_SIZE as i32);
    put_i16(&mut h, 40, 3); // dim[0]
    put_i16(&mut h, 42, nx as i16);
    put_i16(&mut h, 44, ny as i16);
    put_i16(&mut h, 46, nz as i16);
    for d in 4..8 {
        put_i16(&mut h, 40 + 2 * d, 1);
    }
    put_i16(&mut h, 70, DT_FLOAT32);
    put_i16(&mut h, 72, 32); // bitpix

    let orientation = &volume.geometry().orientation;
    let (sx, sy, sz) = volume.spacing();
    put_f32(&mut h, 76, orientation.qfac);
    put_f32(&mut h, 80, sx);
    put_f32(&mut h, 84, sy);
    put_f32(&mut h, 88, sz);

    put_f32(&mut h, 108, VOX_OFFSET as f64);
    put_f32(&mut h, 112, 1.0); // scl_slope
    put_f32(&mut h, 116, 0.0); // scl_inter
    h[123] = 2; // xyzt_units: millimeters

    put_i16(&mut h, 252, orientation.qform_code);
    put_i16(&mut h, 254, orientation.sform_code);
    for (i, &q) in orientation.quatern.iter().enumerate() {
        put_f32(&mut h, 256 + 4 * i, q);
    }
    for (i, &q) in orientation.qoffset.iter().enumerate() {
        put_f32(&mut h, 268 + 4 * i, q);
    }
    for (r, row) in orientation.srow.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            put_f32(&mut h, 280 + 16 * r + 4 * c, v);
        }
    }
    h[344..348].copy_from_slice(MAGIC_SINGLE);
    Ok(h)
}

/// Writes a volume as an uncompressed little-endian float32 NIfTI-1 file
/// with identity scaling, preserving geometry fields.
pub fn write_nifti(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = encode_header(volume)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    writer.write_all(&header).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::with_capacity(volume.voxels().len() * 4);
    for &v in volume.voxels().iter() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    writer.write_all(&buf).map_err(|e| Error::io(path, e))?;
    writer.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Builds a minimal little-endian NIfTI-1 byte stream for tests.
    fn make_file(
        dims: (i16, i16, i16),
        datatype: i16,
        slope: f32,
        inter: f32,
        payload: &[u8],
    ) -> Vec<u8> {
        let mut h = vec![0u8; VOX_OFFSET];
        h[0..4].copy_from_slice(&348i32.to_le_bytes());
        h[40..42].copy_from_slice(&3i16.to_le_bytes());
        h[42..44].copy_from_slice(&dims.0.to_le_bytes());
        h[44..46].copy_from_slice(&dims.1.to_le_bytes());
        h[46..48].copy_from_slice(&dims.2.to_le_bytes());
        h[70..72].copy_from_slice(&datatype.to_le_bytes());
        for d in 1..=3 {
            h[76 + 4 * d..80 + 4 * d].copy_from_slice(&1.0f32.to_le_bytes());
        }
        h[108..112].copy_from_slice(&(VOX_OFFSET as f32).to_le_bytes());
        h[112..116].copy_from_slice(&slope.to_le_bytes());
        h[116..120].copy_from_slice(&inter.to_le_bytes());
        h[344..348].copy_from_slice(MAGIC_SINGLE);
        h.extend_from_slice(payload);
        h
    }

    fn write_temp(bytes: &[u8]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(bytes).unwrap();
        f.flush().unwrap();
        f
    }

    #[test]
    fn reads_float32_volume() {
        let payload: Vec<u8> = (0..8).flat_map(|i| (i as f32).to_le_bytes()).collect();
        let f = write_temp(&make_file((2, 2, 2), DT_FLOAT32, 0.0, 0.0, &payload));
        let v = read_nifti(f.path()).unwrap();
        assert_eq!(v.dims(), (2, 2, 2));
        assert_eq!(v.value_kind(), ValueKind::Raw);
        let flat: Vec<f64> = v.voxels().iter().copied().collect();
        assert_eq!(flat, (0..8).map(f64::from).collect::<Vec<_>>());
    }

    #[test]
    fn rejects_zeroed_magic() {
        let payload: Vec<u8> = (0..8).flat_map(|i| (i as f32).to_le_bytes()).collect();
        let mut bytes = make_file((2, 2, 2), DT_FLOAT32, 0.0, 0.0, &payload);
        bytes[344..348].copy_from_slice(&[0, 0, 0, 0]);
        let f = write_temp(&bytes);
        assert!(matches!(read_nifti(f.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn applies_slope_and_intercept_to_int16() {
        // slope 2, intercept -1000: raw 500 lands exactly on 0 HU.
        let payload = 500i16.to_le_bytes().to_vec();
        let f = write_temp(&make_file((1, 1, 1), DT_INT16, 2.0, -1000.0, &payload));
        let v = read_nifti(f.path()).unwrap();
        assert_eq!(v.voxels()[[0, 0, 0]], 0.0);
    }

    #[test]
    fn zero_slope_means_no_scaling() {
        let payload = 7i16.to_le_bytes().to_vec();
        let f = write_temp(&make_file((1, 1, 1), DT_INT16, 0.0, 123.0, &payload));
        let v = read_nifti(f.path()).unwrap();
        assert_eq!(v.voxels()[[0, 0, 0]], 7.0);
    }

    #[test]
    fn rejects_unsupported_datatype() {
        let payload = vec![0u8; 4];
        let f = write_temp(&make_file((1, 1, 1), 8, 0.0, 0.0, &payload)); // int32
        assert!(matches!(
            read_nifti(f.path()),
            Err(Error::UnsupportedDatatype { code: 8, .. })
        ));
    }

    #[test]
    fn truncated_payload_is_an_io_error() {
        let payload: Vec<u8> = (0..4).flat_map(|i| (i as f32).to_le_bytes()).collect();
        let f = write_temp(&make_file((2, 2, 2), DT_FLOAT32, 0.0, 0.0, &payload));
        assert!(matches!(read_nifti(f.path()), Err(Error::Io { .. })));
    }

    #[test]
    fn short_garbage_never_panics() {
        for len in [0usize, 1, 2, 40, 347] {
            let f = write_temp(&vec![0xABu8; len]);
            assert!(read_nifti(f.path()).is_err());
        }
    }

    #[test]
    fn reads_big_endian_files() {
        let mut h = vec![0u8; VOX_OFFSET];
        h[0..4].copy_from_slice(&348i32.to_be_bytes());
        h[40..42].copy_from_slice(&3i16.to_be_bytes());
        for d in 1..=3 {
            h[40 + 2 * d..42 + 2 * d].copy_from_slice(&1i16.to_be_bytes());
            h[76 + 4 * d..80 + 4 * d].copy_from_slice(&1.0f32.to_be_bytes());
        }
        h[70..72].copy_from_slice(&DT_FLOAT32.to_be_bytes());
        h[108..112].copy_from_slice(&(VOX_OFFSET as f32).to_be_bytes());
        h[344..348].copy_from_slice(MAGIC_SINGLE);
        h.extend_from_slice(&42.5f32.to_be_bytes());
        let f = write_temp(&h);
        let v = read_nifti(f.path()).unwrap();
        assert_eq!(v.voxels()[[0, 0, 0]], 42.5);
    }

    #[test]
    fn gzip_input_is_detected_by_content() {
        let payload: Vec<u8> = (0..8).flat_map(|i| (i as f32).to_le_bytes()).collect();
        let plain = make_file((2, 2, 2), DT_FLOAT32, 0.0, 0.0, &payload);
        let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&plain).unwrap();
        let gz = enc.finish().unwrap();
        // Deliberately no .gz extension: detection is by prefix.
        let f = write_temp(&gz);
        let v = read_nifti(f.path()).unwrap();
        assert_eq!(v.voxels()[[1, 1, 1]], 7.0);
    }

    #[test]
    fn write_then_read_is_identity_for_f32_data() {
        let geometry = VolumeGeometry::new((4, 4, 3), (1.0, 1.0, 2.5)).unwrap();
        let voxels = Array3::from_shape_vec(
            (3, 4, 4),
            (0..48)
                .map(|i| f64::from((i as f32) * 0.37 - 3.0))
                .collect(),
        )
        .unwrap();
        let v = Volume::new(voxels, geometry, ValueKind::Raw).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.nii");
        write_nifti(&v, &path).unwrap();
        let back = read_nifti(&path).unwrap();
        assert_eq!(back.voxels(), v.voxels());
        assert_eq!(back.geometry(), v.geometry());
    }

    #[test]
    fn singleton_volume_payload_decodes_to_its_value() {
        let geometry = VolumeGeometry::new((1, 1, 1), (1.0, 1.0, 1.0)).unwrap();
        let v = Volume::new(
            Array3::from_shape_vec((1, 1, 1), vec![42.0]).unwrap(),
            geometry,
            ValueKind::Raw,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.nii");
        write_nifti(&v, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), VOX_OFFSET + 4);
        assert_eq!(
            f32::from_le_bytes(bytes[VOX_OFFSET..].try_into().unwrap()),
            42.0
        );
    }

    #[test]
    fn unwritable_path_is_an_io_error() {
        let geometry = VolumeGeometry::new((1, 1, 1), (1.0, 1.0, 1.0)).unwrap();
        let v = Volume::new(
            Array3::from_shape_vec((1, 1, 1), vec![1.0]).unwrap(),
            geometry,
            ValueKind::Raw,
        )
        .unwrap();
        assert!(matches!(
            write_nifti(&v, Path::new("/nonexistent-dir/v.nii")),
            Err(Error::Io { .. })
        ));
    }
}
