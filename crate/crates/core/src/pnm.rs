//! Portable pixmap I/O: binary PGM (P5) for masks and label maps, binary
//! PPM (P6) for images. Maxval is fixed at 255 and round-trips are bit-exact
//! at the file level.

use std::io::{Read, Write};
use std::path::Path;

use crate::encoder::Image;
use crate::error::{Error, Result};
use crate::mask::{LabelMap, Mask};

fn write_header(buf: &mut Vec<u8>, magic: &str, w: usize, h: usize) {
    buf.extend_from_slice(magic.as_bytes());
    buf.push(b'\n');
    buf.extend_from_slice(format!("{w} {h}\n255\n").as_bytes());
}

/// Parse the header after the magic: width, height, maxval, then exactly one
/// whitespace byte before the payload. `#` comments are skipped.
fn parse_header(bytes: &[u8], magic: &[u8]) -> Result<(usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::Format {
            offset: 0,
            detail: format!("bad magic, expected {}", String::from_utf8_lossy(magic)),
        });
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // Skip whitespace and comments.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => {
                    return Err(Error::Format {
                        offset: pos,
                        detail: "truncated header".to_string(),
                    })
                }
            }
        }
        let start = pos;
        while let Some(&b) = bytes.get(pos) {
            if b.is_ascii_digit() {
                pos += 1;
            } else {
                break;
            }
        }
        if start == pos {
            return Err(Error::Format {
                offset: pos,
                detail: "expected decimal field".to_string(),
            });
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("digits are utf8");
        *field = text.parse().map_err(|_| Error::Format {
            offset: start,
            detail: "unparsable header field".to_string(),
        })?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => {
            return Err(Error::Format {
                offset: pos,
                detail: "expected single whitespace before payload".to_string(),
            })
        }
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(Error::Format {
            offset: pos,
            detail: format!("unsupported maxval {maxval}"),
        });
    }
    Ok((w, h, pos))
}

pub fn pgm_save(path: &Path, w: usize, h: usize, gray: &[u8]) -> Result<()> {
    if gray.len() != w * h {
        return Err(Error::Shape(format!(
            "gray data {} does not fill {w}x{h}",
            gray.len()
        )));
    }
    let mut buf = Vec::with_capacity(w * h + 32);
    write_header(&mut buf, "P5", w, h);
    buf.extend_from_slice(gray);
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn pgm_load(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let (w, h, payload) = parse_header(&bytes, b"P5")?;
    let need = w * h;
    let data = bytes.get(payload..payload + need).ok_or(Error::Format {
        offset: bytes.len(),
        detail: format!("PGM payload truncated, need {need} bytes"),
    })?;
    Ok((w, h, data.to_vec()))
}

pub fn ppm_save(path: &Path, img: &Image) -> Result<()> {
    let (h, w) = (img.height(), img.width());
    let mut buf = Vec::with_capacity(3 * w * h + 32);
    write_header(&mut buf, "P6", w, h);
    for v in img.data() {
        buf.push((v * 255.0).round() as u8);
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn ppm_load(path: &Path) -> Result<Image> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let (w, h, payload) = parse_header(&bytes, b"P6")?;
    let need = 3 * w * h;
    let data = bytes.get(payload..payload + need).ok_or(Error::Format {
        offset: bytes.len(),
        detail: format!("PPM payload truncated, need {need} bytes"),
    })?;
    let values = data.iter().map(|&b| b as f64 / 255.0).collect();
    Image::from_rgb(h, w, values)
}

pub fn mask_save(path: &Path, mask: &Mask) -> Result<()> {
    let gray: Vec<u8> = mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
    pgm_save(path, mask.width(), mask.height(), &gray)
}

pub fn mask_load(path: &Path) -> Result<Mask> {
    let (w, h, gray) = pgm_load(path)?;
    Mask::from_bits(h, w, gray.iter().map(|&g| g >= 128).collect())
}

pub fn label_map_save(path: &Path, map: &LabelMap) -> Result<()> {
    pgm_save(path, map.width(), map.height(), map.labels())
}

pub fn label_map_load(path: &Path) -> Result<LabelMap> {
    let (w, h, gray) = pgm_load(path)?;
    LabelMap::from_labels(h, w, gray)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rngutil::DetRng;

    #[test]
    fn pgm_file_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let mut rng = DetRng::new(1);
        let gray: Vec<u8> = (0..12 * 7).map(|_| rng.below(256) as u8).collect();
        pgm_save(&path, 12, 7, &gray).unwrap();
        let first = std::fs::read(&path).unwrap();
        let (w, h, back) = pgm_load(&path).unwrap();
        assert_eq!((w, h), (12, 7));
        assert_eq!(back, gray);
        pgm_save(&path, w, h, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }

    #[test]
    fn ppm_file_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i.ppm");
        let mut rng = DetRng::new(2);
        let data: Vec<f64> = (0..5 * 4 * 3).map(|_| (rng.below(256) as f64) / 255.0).collect();
        let img = Image::from_rgb(4, 5, data).unwrap();
        ppm_save(&path, &img).unwrap();
        let first = std::fs::read(&path).unwrap();
        let back = ppm_load(&path).unwrap();
        ppm_save(&path, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }

    #[test]
    fn header_comments_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        std::fs::write(&path, b"P5\n# comment line\n2 1\n255\n\x00\xff").unwrap();
        let (w, h, data) = pgm_load(&path).unwrap();
        assert_eq!((w, h), (2, 1));
        assert_eq!(data, vec![0, 255]);
    }

    #[test]
    fn truncated_pgm_errors_with_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        std::fs::write(&path, b"P5\n4 4\n255\n\x00\x01").unwrap();
        assert!(matches!(
            pgm_load(&path).unwrap_err(),
            Error::Format { .. }
        ));
    }

    #[test]
    fn mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let m = Mask::from_fn(6, 6, |y, x| (y + x) % 3 == 0);
        mask_save(&path, &m).unwrap();
        assert_eq!(mask_load(&path).unwrap(), m);
    }
}
