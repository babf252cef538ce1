//! Binary PPM (P6) images and PGM (P5) label maps, maxval 255.

use std::path::Path;

use crate::error::{Error, Result};
use crate::mixing::LabelMap;
use crate::numerics::Tensor;
use crate::util::write_atomic;

fn fmt_err(path: &Path, offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset,
        msg: msg.into(),
    }
}

struct Header {
    width: usize,
    height: usize,
    data_start: usize,
}

fn parse_header(buf: &[u8], magic: &[u8; 2], path: &Path) -> Result<Header> {
    if buf.len() < 2 || &buf[..2] != magic {
        return Err(fmt_err(
            path,
            0,
            format!("expected magic {}", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        loop {
            match buf.get(pos) {
                Some(b'#') => {
                    while buf.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while buf.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(fmt_err(path, pos, format!("expected header field {}", i + 1)));
        }
        let text = std::str::from_utf8(&buf[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| fmt_err(path, start, "header number out of range"))?;
    }
    match buf.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(fmt_err(path, pos, "expected single whitespace after maxval")),
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(fmt_err(path, pos, format!("maxval {maxval}, only 255 supported")));
    }
    if width == 0 || height == 0 {
        return Err(fmt_err(path, pos, "zero extent"));
    }
    Ok(Header {
        width,
        height,
        data_start: pos,
    })
}

fn payload<'a>(buf: &'a [u8], h: &Header, channels: usize, path: &Path) -> Result<&'a [u8]> {
    let need = h.width * h.height * channels;
    let have = buf.len() - h.data_start;
    if have < need {
        return Err(fmt_err(
            path,
            buf.len(),
            format!("truncated: need {need} data bytes, found {have}"),
        ));
    }
    if have > need {
        return Err(fmt_err(path, h.data_start + need, "trailing bytes"));
    }
    Ok(&buf[h.data_start..])
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = image.chw()?;
    if c != 3 {
        return Err(Error::Shape(format!("PPM needs 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let hw = h * w;
    let d = image.data();
    for p in 0..hw {
        for ch in 0..3 {
            out.push(quantize(d[ch * hw + p]));
        }
    }
    Ok(out)
}

pub fn decode_ppm(buf: &[u8], path: &Path) -> Result<Tensor> {
    let h = parse_header(buf, b"P6", path)?;
    let px = payload(buf, &h, 3, path)?;
    let hw = h.width * h.height;
    let mut data = vec![0.0; 3 * hw];
    for p in 0..hw {
        for ch in 0..3 {
            data[ch * hw + p] = px[3 * p + ch] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h.height, h.width], data)
}

pub fn encode_pgm(label: &LabelMap) -> Vec<u8> {
    let (h, w) = label.dims();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(label.data());
    out
}

pub fn decode_pgm(buf: &[u8], path: &Path) -> Result<LabelMap> {
    let h = parse_header(buf, b"P5", path)?;
    let px = payload(buf, &h, 1, path)?;
    LabelMap::new(h.height, h.width, px.to_vec())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Reads an image/label pair; `expected` is `(height, width)` when known.
pub fn read_sample(
    image_path: &Path,
    label_path: &Path,
    expected: Option<(usize, usize)>,
) -> Result<(Tensor, LabelMap)> {
    let image = decode_ppm(&read_bytes(image_path)?, image_path)?;
    let label = decode_pgm(&read_bytes(label_path)?, label_path)?;
    let (_, ih, iw) = image.chw()?;
    if let Some(dims) = expected {
        if (ih, iw) != dims {
            return Err(fmt_err(image_path, 3, format!("extent {ih}×{iw}, manifest says {}×{}", dims.0, dims.1)));
        }
    }
    if label.dims() != (ih, iw) {
        return Err(fmt_err(
            label_path,
            3,
            format!("extent {:?} differs from image {ih}×{iw}", label.dims()),
        ));
    }
    Ok((image, label))
}

pub fn write_sample(image_path: &Path, label_path: &Path, image: &Tensor, label: &LabelMap) -> Result<()> {
    let (_, h, w) = image.chw()?;
    if label.dims() != (h, w) {
        return Err(Error::Shape("image and label extents differ".into()));
    }
    write_atomic(image_path, &encode_ppm(image)?)?;
    write_atomic(label_path, &encode_pgm(label))
}
