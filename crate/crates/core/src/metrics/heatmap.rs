use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Per-pixel `|a − b|`.
pub fn heatmap(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Array2<f64>> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    let mut out = a.to_owned();
    out.zip_mut_with(&b, |x, &y| *x = (*x - y).abs());
    Ok(out)
}

/// Min-max scaling to `[0, 255]`; a constant map exports as all zeros.
pub fn heatmap_u8(map: ArrayView2<f64>) -> Array2<u8> {
    let min = map.iter().copied().fold(f64::INFINITY, f64::min);
    let max = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return Array2::zeros(map.dim());
    }
    map.mapv(|v| ((v - min) / (max - min) * 255.0).round() as u8)
}

/// Writes the scaled map as an 8-bit grayscale PNG.
pub fn write_heatmap_png(map: ArrayView2<f64>, path: &Path) -> Result<()> {
    let img = heatmap_u8(map);
    let (h, w) = img.dim();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let to_err = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(to_err)?;
    let bytes: Vec<u8> = img.iter().copied().collect();
    writer.write_image_data(&bytes).map_err(to_err)?;
    writer.finish().map_err(to_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_inputs_give_zero_map() {
        let a = Array2::from_shape_fn((8, 8), |(y, x)| (y * x) as f64);
        let m = heatmap(a.view(), a.view()).unwrap();
        assert!(m.iter().all(|&v| v == 0.0));
        assert!(heatmap_u8(m.view()).iter().all(|&v| v == 0));
        assert!(heatmap(a.view(), Array2::zeros((2, 2)).view()).is_err());
    }

    #[test]
    fn local_difference_stays_local_and_peaks_at_255() {
        let a = Array2::<f64>::zeros((64, 64));
        let mut b = a.clone();
        for y in 10..42 {
            for x in 20..52 {
                b[[y, x]] = 1.0 + ((y + x) % 5) as f64;
            }
        }
        let m = heatmap_u8(heatmap(a.view(), b.view()).unwrap().view());
        assert_eq!(m.iter().filter(|&&v| v > 0).count(), 1024);
        assert_eq!(*m.iter().max().unwrap(), 255);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.png");
        let map = Array2::from_shape_fn((5, 7), |(y, x)| (y * 7 + x) as f64);
        write_heatmap_png(map.view(), &path).unwrap();
        let dec = png::Decoder::new(std::io::BufReader::new(File::open(&path).unwrap()));
        let mut reader = dec.read_info().unwrap();
        let mut buf = vec![0; reader.output_buffer_size().unwrap()];
        let info = reader.next_frame(&mut buf).unwrap();
        assert_eq!((info.width, info.height), (7, 5));
        assert_eq!(buf[0], 0);
        assert_eq!(buf[34], 255);
        assert_eq!(&buf[..35], heatmap_u8(map.view()).as_slice().unwrap());
    }
}
