//! Heat-map export: single-channel feature maps rendered as binary PGM (P5).

use std::path::Path;

use mfpnet::{Error, Result};

/// Min-max normalize a 2-D map to 0..=255 and write it as binary PGM.
/// Constant maps render as mid-gray 128.
pub fn export_heatmap(map: &[f32], height: usize, width: usize, path: &Path) -> Result<()> {
    if map.len() != height * width {
        return Err(Error::shape(format!(
            "heatmap: {} values do not fill {height}x{width}",
            map.len()
        )));
    }
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in map {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let pixels: Vec<u8> = if hi > lo {
        let scale = 255.0 / (hi - lo) as f64;
        map.iter().map(|&v| (((v - lo) as f64 * scale).round() as i64).clamp(0, 255) as u8).collect()
    } else {
        vec![128u8; map.len()]
    };
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(&pixels);
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Parse a binary PGM header, returning (width, height, payload offset).
#[cfg(test)]
pub fn parse_pgm_header(bytes: &[u8]) -> Result<(usize, usize, usize)> {
    let header_end = bytes
        .iter()
        .enumerate()
        .filter(|(_, &b)| b == b'\n')
        .nth(2)
        .map(|(i, _)| i + 1)
        .ok_or_else(|| Error::Format { offset: 0, message: "truncated PGM header".into() })?;
    let text = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| Error::Format { offset: 0, message: "PGM header is not ascii".into() })?;
    let mut lines = text.lines();
    if lines.next() != Some("P5") {
        return Err(Error::Format { offset: 0, message: "not a P5 PGM".into() });
    }
    let dims = lines
        .next()
        .ok_or_else(|| Error::Format { offset: 3, message: "missing dimensions".into() })?;
    let (w, h) = dims
        .split_once(' ')
        .ok_or_else(|| Error::Format { offset: 3, message: "malformed dimensions".into() })?;
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|_| Error::Format { offset: 3, message: format!("bad extent {v:?}") })
    };
    Ok((parse(w)?, parse(h)?, header_end))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_renders_mid_gray() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        export_heatmap(&[0.7f32; 12], 3, 4, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let (w, h, off) = parse_pgm_header(&bytes).unwrap();
        assert_eq!((w, h), (4, 3));
        assert!(bytes[off..].iter().all(|&b| b == 128));
    }

    #[test]
    fn min_max_map_to_range_endpoints() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        export_heatmap(&[0.0, 0.25, 0.5, 1.0], 2, 2, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let (_, _, off) = parse_pgm_header(&bytes).unwrap();
        let px = &bytes[off..];
        assert!(px.contains(&0) && px.contains(&255), "{px:?}");
    }

    #[test]
    fn header_round_trip_has_declared_dims() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.pgm");
        export_heatmap(&vec![0.1f32; 5 * 7], 5, 7, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let (w, h, off) = parse_pgm_header(&bytes).unwrap();
        assert_eq!((w, h), (7, 5));
        assert_eq!(bytes.len() - off, 35);
    }
}
