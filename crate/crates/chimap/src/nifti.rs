//! NIfTI-1 single-file volume I/O and JSON acquisition sidecars.
//!
//! Supports the single-file `.nii` layout (348-byte header, magic "n+1\0")
//! with optional gzip compression (`.nii.gz`), auto-detected endianness,
//! datatypes {uint8, int16, int32, float32, float64} converted to float32,
//! and `scl_slope` / `scl_inter` scaling. Paired `.hdr`/`.img` files
//! (magic "ni1\0") are rejected explicitly. Header bytes the reader does
//! not interpret are kept verbatim and written back on save.

use crate::error::{Error, NiftiError, Result};
use crate::forward::AcquisitionSettings;
use crate::volume::EchoVolume;
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use serde::Deserialize;
use std::io::{Read, Write};
use std::path::Path;

const HDR_SIZE: usize = 348;
const MAGIC_SINGLE: &[u8; 4] = b"n+1\0";
const MAGIC_PAIRED: &[u8; 4] = b"ni1\0";

// Header field offsets (NIfTI-1).
mod off {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const QFORM_CODE: usize = 252;
    pub const SFORM_CODE: usize = 254;
    pub const QUATERN: usize = 256; // b, c, d then qoffset x, y, z
    pub const SROW_X: usize = 280;
    pub const SROW_Y: usize = 296;
    pub const SROW_Z: usize = 312;
    pub const MAGIC: usize = 344;
}

// Datatype codes.
const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;

struct Codec {
    swapped: bool,
}

impl Codec {
    fn i16(&self, b: &[u8], at: usize) -> i16 {
        let raw = [b[at], b[at + 1]];
        if self.swapped {
            i16::from_be_bytes(raw)
        } else {
            i16::from_le_bytes(raw)
        }
    }

    fn f32(&self, b: &[u8], at: usize) -> f32 {
        let raw = [b[at], b[at + 1], b[at + 2], b[at + 3]];
        if self.swapped {
            f32::from_be_bytes(raw)
        } else {
            f32::from_le_bytes(raw)
        }
    }

    fn put_i16(&self, b: &mut [u8], at: usize, v: i16) {
        let raw = if self.swapped {
            v.to_be_bytes()
        } else {
            v.to_le_bytes()
        };
        b[at..at + 2].copy_from_slice(&raw);
    }

    fn put_i32(&self, b: &mut [u8], at: usize, v: i32) {
        let raw = if self.swapped {
            v.to_be_bytes()
        } else {
            v.to_le_bytes()
        };
        b[at..at + 4].copy_from_slice(&raw);
    }

    fn put_f32(&self, b: &mut [u8], at: usize, v: f32) {
        let raw = if self.swapped {
            v.to_be_bytes()
        } else {
            v.to_le_bytes()
        };
        b[at..at + 4].copy_from_slice(&raw);
    }
}

fn read_file_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Read a NIfTI-1 single-file volume (`.nii` or `.nii.gz`).
pub fn read_volume(path: impl AsRef<Path>) -> Result<EchoVolume> {
    let path = path.as_ref();
    let bytes = read_file_maybe_gz(path)?;
    if bytes.len() < HDR_SIZE {
        return Err(NiftiError::BadHeader(format!(
            "file is {} bytes, smaller than the 348-byte header",
            bytes.len()
        ))
        .into());
    }
    let magic: [u8; 4] = bytes[off::MAGIC..off::MAGIC + 4].try_into().unwrap();
    if &magic == MAGIC_PAIRED {
        return Err(NiftiError::PairedUnsupported.into());
    }
    if &magic != MAGIC_SINGLE {
        return Err(NiftiError::BadMagic(magic).into());
    }
    let sizeof_le = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let sizeof_be = i32::from_be_bytes(bytes[0..4].try_into().unwrap());
    let codec = if sizeof_le == HDR_SIZE as i32 {
        Codec { swapped: false }
    } else if sizeof_be == HDR_SIZE as i32 {
        Codec { swapped: true }
    } else {
        return Err(NiftiError::BadHeader(format!(
            "sizeof_hdr = {sizeof_le} in either byte order, expected 348"
        ))
        .into());
    };

    let ndim = codec.i16(&bytes, off::DIM) as usize;
    if ndim == 0 || ndim > 7 {
        return Err(NiftiError::BadHeader(format!("dim[0] = {ndim} out of range")).into());
    }
    let mut dims_all = [1usize; 7];
    for (i, d) in dims_all.iter_mut().enumerate().take(ndim) {
        let v = codec.i16(&bytes, off::DIM + 2 * (i + 1));
        if v <= 0 {
            return Err(NiftiError::BadHeader(format!("dim[{}] = {v} must be positive", i + 1)).into());
        }
        *d = v as usize;
    }
    if ndim > 3 && dims_all[3..].iter().any(|&d| d != 1) {
        return Err(NiftiError::BadHeader(
            "4-D (or higher) volumes are not supported; split time points first".into(),
        )
        .into());
    }
    let dims = [dims_all[0], dims_all[1], dims_all[2]];
    let n_vox = dims[0] * dims[1] * dims[2];

    let datatype = codec.i16(&bytes, off::DATATYPE);
    let elem = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_INT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(NiftiError::UnsupportedDatatype(other).into()),
    };
    let vox_offset = codec.f32(&bytes, off::VOX_OFFSET) as usize;
    let data_start = vox_offset.max(HDR_SIZE);
    let need = data_start + n_vox * elem;
    if bytes.len() < need {
        return Err(NiftiError::Truncated {
            expected: need,
            found: bytes.len(),
        }
        .into());
    }

    let mut scl_slope = codec.f32(&bytes, off::SCL_SLOPE);
    let scl_inter = codec.f32(&bytes, off::SCL_INTER);
    if scl_slope == 0.0 || !scl_slope.is_finite() {
        scl_slope = 1.0;
    }
    let scl_inter = if scl_inter.is_finite() { scl_inter } else { 0.0 };

    let payload = &bytes[data_start..need];
    let fetch = |i: usize| -> f32 {
        let at = i * elem;
        match datatype {
            DT_UINT8 => payload[at] as f32,
            DT_INT16 => codec.i16(payload, at) as f32,
            DT_INT32 => {
                let raw = [payload[at], payload[at + 1], payload[at + 2], payload[at + 3]];
                (if codec.swapped {
                    i32::from_be_bytes(raw)
                } else {
                    i32::from_le_bytes(raw)
                }) as f32
            }
            DT_FLOAT32 => codec.f32(payload, at),
            DT_FLOAT64 => {
                let raw: [u8; 8] = payload[at..at + 8].try_into().unwrap();
                (if codec.swapped {
                    f64::from_be_bytes(raw)
                } else {
                    f64::from_le_bytes(raw)
                }) as f32
            }
            _ => unreachable!(),
        }
    };
    let identity_scaling = scl_slope == 1.0 && scl_inter == 0.0;
    let mut data = Vec::with_capacity(n_vox);
    for i in 0..n_vox {
        let v = fetch(i);
        // NaN payloads pass through untouched under identity scaling.
        data.push(if identity_scaling {
            v
        } else {
            v * scl_slope + scl_inter
        });
    }

    let mut pixdim = [1.0f64; 3];
    for (i, p) in pixdim.iter_mut().enumerate() {
        let v = codec.f32(&bytes, off::PIXDIM + 4 * (i + 1)) as f64;
        *p = if v > 0.0 { v } else { 1.0 };
    }

    let affine = decode_affine(&codec, &bytes, pixdim);

    let mut vol = EchoVolume::new(dims, pixdim, affine, data)?;
    // Keep original header bytes (always stored little-endian internally,
    // byte-swapped files are normalised on rewrite).
    if !codec.swapped {
        let mut hdr = [0u8; HDR_SIZE];
        hdr.copy_from_slice(&bytes[..HDR_SIZE]);
        vol.raw_header = Some(Box::new(hdr));
    }
    Ok(vol)
}

fn decode_affine(codec: &Codec, bytes: &[u8], pixdim: [f64; 3]) -> [[f64; 4]; 4] {
    let sform = codec.i16(bytes, off::SFORM_CODE);
    let qform = codec.i16(bytes, off::QFORM_CODE);
    let mut affine = [[0.0f64; 4]; 4];
    affine[3][3] = 1.0;
    if sform > 0 {
        for (r, base) in [off::SROW_X, off::SROW_Y, off::SROW_Z].iter().enumerate() {
            for c in 0..4 {
                affine[r][c] = codec.f32(bytes, base + 4 * c) as f64;
            }
        }
        return affine;
    }
    if qform > 0 {
        let b = codec.f32(bytes, off::QUATERN) as f64;
        let c = codec.f32(bytes, off::QUATERN + 4) as f64;
        let d = codec.f32(bytes, off::QUATERN + 8) as f64;
        let a = (1.0 - b * b - c * c - d * d).max(0.0).sqrt();
        let qfac = {
            let v = codec.f32(bytes, off::PIXDIM) as f64;
            if v < 0.0 {
                -1.0
            } else {
                1.0
            }
        };
        let rot = [
            [
                a * a + b * b - c * c - d * d,
                2.0 * (b * c - a * d),
                2.0 * (b * d + a * c),
            ],
            [
                2.0 * (b * c + a * d),
                a * a + c * c - b * b - d * d,
                2.0 * (c * d - a * b),
            ],
            [
                2.0 * (b * d - a * c),
                2.0 * (c * d + a * b),
                a * a + d * d - b * b - c * c,
            ],
        ];
        for r in 0..3 {
            for col in 0..3 {
                let scale = if col == 2 { pixdim[2] * qfac } else { pixdim[col] };
                affine[r][col] = rot[r][col] * scale;
            }
            affine[r][3] = codec.f32(bytes, off::QUATERN + 12 + 4 * r) as f64;
        }
        return affine;
    }
    for i in 0..3 {
        affine[i][i] = pixdim[i];
    }
    affine
}

/// Write a volume as NIfTI-1 float32 (`.nii`, or gzip if the path ends in `.gz`).
///
/// Round-trips with [`read_volume`]: dims and float32 data exactly, affine
/// to f32 precision. Unrecognised header fields from a previously read file
/// are preserved verbatim.
pub fn write_volume(vol: &EchoVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let codec = Codec { swapped: false };
    let mut hdr = match &vol.raw_header {
        Some(h) => *h.clone(),
        None => [0u8; HDR_SIZE],
    };
    codec.put_i32(&mut hdr, off::SIZEOF_HDR, HDR_SIZE as i32);
    codec.put_i16(&mut hdr, off::DIM, 3);
    for i in 0..3 {
        codec.put_i16(&mut hdr, off::DIM + 2 * (i + 1), vol.dims[i] as i16);
    }
    for i in 4..8 {
        codec.put_i16(&mut hdr, off::DIM + 2 * i, 1);
    }
    codec.put_i16(&mut hdr, off::DATATYPE, DT_FLOAT32);
    codec.put_i16(&mut hdr, off::BITPIX, 32);
    if codec.f32(&hdr, off::PIXDIM) == 0.0 {
        codec.put_f32(&mut hdr, off::PIXDIM, 1.0);
    }
    for i in 0..3 {
        codec.put_f32(&mut hdr, off::PIXDIM + 4 * (i + 1), vol.voxel_size[i] as f32);
    }
    codec.put_f32(&mut hdr, off::VOX_OFFSET, 352.0);
    codec.put_f32(&mut hdr, off::SCL_SLOPE, 1.0);
    codec.put_f32(&mut hdr, off::SCL_INTER, 0.0);
    codec.put_i16(&mut hdr, off::SFORM_CODE, 2);
    for (r, base) in [off::SROW_X, off::SROW_Y, off::SROW_Z].iter().enumerate() {
        for c in 0..4 {
            codec.put_f32(&mut hdr, base + 4 * c, vol.affine[r][c] as f32);
        }
    }
    hdr[off::MAGIC..off::MAGIC + 4].copy_from_slice(MAGIC_SINGLE);

    let mut out: Vec<u8> = Vec::with_capacity(352 + 4 * vol.data.len());
    out.extend_from_slice(&hdr);
    out.extend_from_slice(&[0u8; 4]); // pad to vox_offset = 352
    for &v in &vol.data {
        out.extend_from_slice(&v.to_le_bytes());
    }

    let gz = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("gz"));
    if gz {
        let file = std::fs::File::create(path)?;
        let mut enc = GzEncoder::new(file, flate2::Compression::default());
        enc.write_all(&out)?;
        enc.finish()?;
    } else {
        std::fs::write(path, &out)?;
    }
    Ok(())
}

#[derive(Deserialize)]
struct RawSidecar {
    tr_s: f64,
    te_s: f64,
    flip_deg: f64,
    mt_pulse: i64,
    #[serde(default)]
    tr2_s: f64,
}

/// Read a JSON acquisition sidecar.
///
/// Required keys: `tr_s`, `te_s`, `flip_deg`, `mt_pulse` (0 or 1);
/// `tr2_s` defaults to 0. The flip angle is converted to radians.
pub fn read_sidecar(path: impl AsRef<Path>) -> Result<AcquisitionSettings> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_sidecar(&text).map_err(|e| match e {
        Error::Invalid(msg) => Error::invalid(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub(crate) fn parse_sidecar(text: &str) -> Result<AcquisitionSettings> {
    let raw: RawSidecar =
        serde_json::from_str(text).map_err(|e| Error::invalid(format!("sidecar: {e}")))?;
    if raw.mt_pulse != 0 && raw.mt_pulse != 1 {
        return Err(Error::invalid(format!(
            "sidecar: mt_pulse must be 0 or 1, got {}",
            raw.mt_pulse
        )));
    }
    AcquisitionSettings::new(
        raw.tr_s,
        raw.te_s,
        raw.flip_deg.to_radians(),
        raw.mt_pulse == 1,
        raw.tr2_s,
    )
}

/// Write the JSON sidecar for one acquisition (degrees at the boundary).
pub fn write_sidecar(s: &AcquisitionSettings, path: impl AsRef<Path>) -> Result<()> {
    let json = serde_json::json!({
        "tr_s": s.tr_s,
        "te_s": s.te_s,
        "flip_deg": s.flip_rad.to_degrees(),
        "mt_pulse": if s.mt_pulse { 1 } else { 0 },
        "tr2_s": s.tr2_s,
    });
    std::fs::write(path, format!("{:#}\n", json))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn sample_volume() -> EchoVolume {
        let dims = [7, 5, 3];
        let data: Vec<f32> = (0..105).map(|i| (i as f32) * 0.25 - 3.0).collect();
        let mut vol = EchoVolume::from_data(dims, [0.8, 0.8, 1.2], data).unwrap();
        vol.affine[0][3] = -12.5;
        vol.affine[1][3] = 4.0;
        vol
    }

    #[test]
    fn roundtrip_identity() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("vol.nii");
        let vol = sample_volume();
        write_volume(&vol, &path).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(back.dims, vol.dims);
        assert_eq!(back.data, vol.data); // bit-exact for float32
        for r in 0..4 {
            for c in 0..4 {
                assert!((back.affine[r][c] - vol.affine[r][c]).abs() < 1e-6);
            }
        }
        for i in 0..3 {
            assert!((back.voxel_size[i] - vol.voxel_size[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn roundtrip_preserves_nan_payloads() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("nan.nii");
        let mut vol = sample_volume();
        let payload = f32::from_bits(0x7fc0_1234);
        vol.data[17] = payload;
        write_volume(&vol, &path).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(back.data[17].to_bits(), payload.to_bits());
    }

    #[test]
    fn roundtrip_gzip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("vol.nii.gz");
        let vol = sample_volume();
        write_volume(&vol, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..2], &[0x1f, 0x8b]);
        let back = read_volume(&path).unwrap();
        assert_eq!(back.data, vol.data);
    }

    #[test]
    fn byte_swapped_header_is_decoded() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("be.nii");
        let vol = sample_volume();
        write_volume(&vol, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // Swap every multi-byte field we read, simulating a big-endian writer.
        let swap2 = |b: &mut [u8], at: usize| b.swap(at, at + 1);
        let swap4 = |b: &mut [u8], at: usize| {
            b.swap(at, at + 3);
            b.swap(at + 1, at + 2);
        };
        swap4(&mut bytes, off::SIZEOF_HDR);
        for i in 0..8 {
            swap2(&mut bytes, off::DIM + 2 * i);
        }
        swap2(&mut bytes, off::DATATYPE);
        swap2(&mut bytes, off::BITPIX);
        for i in 0..8 {
            swap4(&mut bytes, off::PIXDIM + 4 * i);
        }
        swap4(&mut bytes, off::VOX_OFFSET);
        swap4(&mut bytes, off::SCL_SLOPE);
        swap4(&mut bytes, off::SCL_INTER);
        swap2(&mut bytes, off::QFORM_CODE);
        swap2(&mut bytes, off::SFORM_CODE);
        for i in 0..12 {
            swap4(&mut bytes, off::QUATERN + 4 * i);
        }
        for base in [off::SROW_X, off::SROW_Y, off::SROW_Z] {
            for c in 0..4 {
                swap4(&mut bytes, base + 4 * c);
            }
        }
        for i in 0..vol.data.len() {
            swap4(&mut bytes, 352 + 4 * i);
        }
        std::fs::write(&path, &bytes).unwrap();
        // sizeof_hdr now reads as 1543569408 little-endian.
        let sizeof_le = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
        assert_eq!(sizeof_le, 1_543_569_408);
        let back = read_volume(&path).unwrap();
        assert_eq!(back.dims, vol.dims);
        assert_eq!(back.data, vol.data);
    }

    #[test]
    fn scl_scaling_applied() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("scl.nii");
        let vol = sample_volume();
        write_volume(&vol, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[off::SCL_SLOPE..off::SCL_SLOPE + 4].copy_from_slice(&2.0f32.to_le_bytes());
        bytes[off::SCL_INTER..off::SCL_INTER + 4].copy_from_slice(&1.5f32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let back = read_volume(&path).unwrap();
        for (a, b) in back.data.iter().zip(&vol.data) {
            assert!((a - (b * 2.0 + 1.5)).abs() < 1e-5);
        }
    }

    #[test]
    fn distinct_errors() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.nii");
        let vol = sample_volume();
        write_volume(&vol, &path).unwrap();
        let good = std::fs::read(&path).unwrap();

        // Paired magic.
        let mut paired = good.clone();
        paired[off::MAGIC..off::MAGIC + 4].copy_from_slice(MAGIC_PAIRED);
        std::fs::write(&path, &paired).unwrap();
        assert!(matches!(
            read_volume(&path),
            Err(Error::Nifti(NiftiError::PairedUnsupported))
        ));

        // Garbage magic.
        let mut bad_magic = good.clone();
        bad_magic[off::MAGIC..off::MAGIC + 4].copy_from_slice(b"xxx\0");
        std::fs::write(&path, &bad_magic).unwrap();
        assert!(matches!(
            read_volume(&path),
            Err(Error::Nifti(NiftiError::BadMagic(_)))
        ));

        // Unsupported datatype (complex64 = 32).
        let mut bad_dt = good.clone();
        bad_dt[off::DATATYPE..off::DATATYPE + 2].copy_from_slice(&32i16.to_le_bytes());
        std::fs::write(&path, &bad_dt).unwrap();
        assert!(matches!(
            read_volume(&path),
            Err(Error::Nifti(NiftiError::UnsupportedDatatype(32)))
        ));

        // Truncated payload.
        let truncated = good[..good.len() - 10].to_vec();
        std::fs::write(&path, &truncated).unwrap();
        assert!(matches!(
            read_volume(&path),
            Err(Error::Nifti(NiftiError::Truncated { .. }))
        ));
    }

    #[test]
    fn unknown_header_bytes_survive_rewrite() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("descrip.nii");
        let vol = sample_volume();
        write_volume(&vol, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // 'descrip' field at offset 148 is not interpreted by the reader.
        bytes[148..148 + 10].copy_from_slice(b"hello test");
        std::fs::write(&path, &bytes).unwrap();
        let back = read_volume(&path).unwrap();
        let path2 = dir.path().join("descrip2.nii");
        write_volume(&back, &path2).unwrap();
        let rewritten = std::fs::read(&path2).unwrap();
        assert_eq!(&rewritten[148..158], b"hello test");
    }

    #[test]
    fn sidecar_parsing() {
        let s = parse_sidecar(
            r#"{"tr_s":0.025, "te_s":0.0023, "flip_deg":6, "mt_pulse":0}"#,
        )
        .unwrap();
        assert_eq!(s.tr_s, 0.025);
        assert_eq!(s.te_s, 0.0023);
        assert!((s.flip_rad - 0.10472).abs() < 1e-5);
        assert!(!s.mt_pulse);
        assert_eq!(s.tr2_s, 0.0);

        assert!(parse_sidecar(r#"{"tr_s":0.025, "te_s":0.0023, "flip_deg":6, "mt_pulse":2}"#)
            .is_err());
        assert!(parse_sidecar(r#"{"tr_s":0.025, "te_s":0.0023, "flip_deg":0, "mt_pulse":0}"#)
            .is_err());
        assert!(parse_sidecar(r#"{"te_s":0.0023, "flip_deg":6, "mt_pulse":0}"#).is_err());
        assert!(
            parse_sidecar(r#"{"tr_s":"fast", "te_s":0.0023, "flip_deg":6, "mt_pulse":0}"#)
                .is_err()
        );
    }

    #[test]
    fn sidecar_roundtrip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("e1.json");
        let s = AcquisitionSettings::new(0.021, 0.0069, 0.10472, true, 0.004).unwrap();
        write_sidecar(&s, &path).unwrap();
        let back = read_sidecar(&path).unwrap();
        assert!((back.tr_s - s.tr_s).abs() < 1e-12);
        assert!((back.flip_rad - s.flip_rad).abs() < 1e-12);
        assert_eq!(back.mt_pulse, s.mt_pulse);
        assert!((back.tr2_s - s.tr2_s).abs() < 1e-12);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(16))]
            #[test]
            fn roundtrip_random_volumes(
                nx in 1usize..6,
                ny in 1usize..6,
                nz in 1usize..6,
                seed in 0u64..1000,
            ) {
                let n = nx * ny * nz;
                let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15) | 1;
                let data: Vec<f32> = (0..n).map(|_| {
                    state ^= state << 13;
                    state ^= state >> 7;
                    state ^= state << 17;
                    ((state >> 40) as f32) / 1e6 - 8.0
                }).collect();
                let vol = EchoVolume::from_data([nx, ny, nz], [1.0, 2.0, 0.5], data).unwrap();
                let dir = tempdir().unwrap();
                let path = dir.path().join("p.nii");
                write_volume(&vol, &path).unwrap();
                let back = read_volume(&path).unwrap();
                prop_assert_eq!(back.dims, vol.dims);
                prop_assert_eq!(back.data, vol.data);
            }
        }
    }
}
