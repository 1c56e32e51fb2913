use std::fmt::Write as _;

use base64::Engine as _;

use crate::dataset::RgbImage;
use crate::inference::Detection;

/// Uncompressed 24-bit BMP, bottom-up rows padded to 4 bytes.
pub fn to_bmp(img: &RgbImage) -> Vec<u8> {
    let (w, h) = (img.width(), img.height());
    let row = (w * 3).div_ceil(4) * 4;
    let size = 54 + row * h;
    let mut out = Vec::with_capacity(size);
    out.extend_from_slice(b"BM");
    out.extend_from_slice(&(size as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&54u32.to_le_bytes());
    out.extend_from_slice(&40u32.to_le_bytes());
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&24u16.to_le_bytes());
    out.extend_from_slice(&[0u8; 24]);
    for y in (0..h).rev() {
        for x in 0..w {
            let [r, g, b] = img.get(x, y);
            out.extend_from_slice(&[b, g, r]);
        }
        out.resize(out.len() + row - w * 3, 0);
    }
    out
}

/// Frame raster with detection boxes drawn on top.
pub fn overlay_svg(img: &RgbImage, detections: &[Detection], class_names: &[String]) -> String {
    let (w, h) = (img.width(), img.height());
    let data = base64::engine::general_purpose::STANDARD.encode(to_bmp(img));
    let mut s = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">
<image width="{w}" height="{h}" href="data:image/bmp;base64,{data}"/>
"#
    );
    for d in detections {
        let b = &d.bbox;
        let name = class_names
            .get(d.class_id)
            .cloned()
            .unwrap_or_else(|| d.class_id.to_string());
        let _ = writeln!(
            s,
            r##"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="#00e5ff" stroke-width="2"/><text x="{:.1}" y="{:.1}" fill="#00e5ff">{name} {:.2}</text>"##,
            b.x1,
            b.y1,
            b.width(),
            b.height(),
            b.x1 + 2.0,
            (b.y1 - 3.0).max(10.0),
            d.confidence
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bmp_layout() {
        let mut img = RgbImage::filled(3, 2, [0, 0, 0]).unwrap();
        img.put(0, 1, [1, 2, 3]);
        let bmp = to_bmp(&img);
        assert_eq!(&bmp[..2], b"BM");
        assert_eq!(bmp.len(), 54 + 12 * 2);
        // bottom row comes first, stored as BGR
        assert_eq!(&bmp[54..57], &[3, 2, 1]);
    }
}
