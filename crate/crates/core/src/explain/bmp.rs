//! Uncompressed 24-bit BMP writer.
//!
//! Layout: 14-byte file header (`BM`, file size, two reserved zeros, pixel
//! offset 54), 40-byte info header (width, positive height, 1 plane, 24
//! bits, no compression, image size, 2835 px/m both axes, no palette),
//! then rows bottom-up in BGR order, each padded to a multiple of 4 bytes.

/// Row-major RGB raster, top row first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<[u8; 3]>,
}

impl Raster {
    pub fn new(width: usize, height: usize, fill: [u8; 3]) -> Self {
        Raster {
            width,
            height,
            rgb: vec![fill; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        self.rgb[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, c: [u8; 3]) {
        if x < self.width && y < self.height {
            self.rgb[y * self.width + x] = c;
        }
    }

    pub fn blit(&mut self, other: &Raster, x0: usize, y0: usize) {
        for y in 0..other.height {
            for x in 0..other.width {
                self.set(x0 + x, y0 + y, other.get(x, y));
            }
        }
    }

    pub fn to_bmp(&self) -> Vec<u8> {
        let row = (self.width * 3).div_ceil(4) * 4;
        let image = row * self.height;
        let mut out = Vec::with_capacity(54 + image);
        out.extend_from_slice(b"BM");
        out.extend_from_slice(&((54 + image) as u32).to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        out.extend_from_slice(&54u32.to_le_bytes());
        out.extend_from_slice(&40u32.to_le_bytes());
        out.extend_from_slice(&(self.width as i32).to_le_bytes());
        out.extend_from_slice(&(self.height as i32).to_le_bytes());
        out.extend_from_slice(&1u16.to_le_bytes());
        out.extend_from_slice(&24u16.to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        out.extend_from_slice(&(image as u32).to_le_bytes());
        out.extend_from_slice(&2835i32.to_le_bytes());
        out.extend_from_slice(&2835i32.to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        for y in (0..self.height).rev() {
            let start = out.len();
            for x in 0..self.width {
                let [r, g, b] = self.get(x, y);
                out.extend_from_slice(&[b, g, r]);
            }
            out.resize(start + row, 0);
        }
        out
    }

    /// Reads back what [`Raster::to_bmp`] writes.
    pub fn from_bmp(bytes: &[u8]) -> Option<Raster> {
        if bytes.len() < 54 || &bytes[0..2] != b"BM" {
            return None;
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let offset = u32_at(10) as usize;
        let width = u32_at(18) as usize;
        let height = u32_at(22) as usize;
        if u16::from_le_bytes([bytes[28], bytes[29]]) != 24 {
            return None;
        }
        let row = (width * 3).div_ceil(4) * 4;
        if bytes.len() < offset + row * height {
            return None;
        }
        let mut r = Raster::new(width, height, [0; 3]);
        for y in 0..height {
            let base = offset + (height - 1 - y) * row;
            for x in 0..width {
                let p = &bytes[base + 3 * x..base + 3 * x + 3];
                r.set(x, y, [p[2], p[1], p[0]]);
            }
        }
        Some(r)
    }
}
