//! Baseline sequential JPEG encoder (Huffman, 8-bit, YCbCr).

use super::dct;
use super::tables::*;
use crate::image::RasterImage;

/// Chroma sampling layout for encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ChromaSubsampling {
    /// 2x2 chroma decimation.
    #[default]
    Yuv420,
    /// Full-resolution chroma.
    Yuv444,
}

impl ChromaSubsampling {
    fn luma_factor(self) -> usize {
        match self {
            ChromaSubsampling::Yuv420 => 2,
            ChromaSubsampling::Yuv444 => 1,
        }
    }
}

struct HuffEncoder {
    code: [u16; 256],
    size: [u8; 256],
}

impl HuffEncoder {
    fn new(bits: &[u8; 16], vals: &[u8]) -> Self {
        let mut code = [0u16; 256];
        let mut size = [0u8; 256];
        let mut c = 0u16;
        let mut k = 0;
        for (len, &count) in bits.iter().enumerate() {
            for _ in 0..count {
                code[vals[k] as usize] = c;
                size[vals[k] as usize] = len as u8 + 1;
                c += 1;
                k += 1;
            }
            c <<= 1;
        }
        HuffEncoder { code, size }
    }
}

struct BitWriter {
    out: Vec<u8>,
    acc: u32,
    nbits: u32,
}

impl BitWriter {
    fn put(&mut self, value: u16, len: u8) {
        if len == 0 {
            return;
        }
        let len = u32::from(len);
        self.acc = (self.acc << len) | (u32::from(value) & ((1 << len) - 1));
        self.nbits += len;
        while self.nbits >= 8 {
            let byte = (self.acc >> (self.nbits - 8)) as u8;
            self.out.push(byte);
            if byte == 0xff {
                self.out.push(0);
            }
            self.nbits -= 8;
        }
        self.acc &= (1 << self.nbits) - 1;
    }

    fn flush(&mut self) {
        if self.nbits > 0 {
            let pad = 8 - self.nbits;
            self.put((1 << pad) - 1, pad as u8);
        }
    }
}

fn category(v: i32) -> u8 {
    (32 - v.unsigned_abs().leading_zeros()) as u8
}

fn magnitude_bits(v: i32, cat: u8) -> u16 {
    if v >= 0 {
        v as u16
    } else {
        ((v - 1) & ((1 << cat) - 1)) as u16
    }
}

struct Component<'a> {
    plane: Vec<f64>,
    width: usize,
    quant: &'a [u16; 64],
    dc: &'a HuffEncoder,
    ac: &'a HuffEncoder,
    pred: i32,
}

impl Component<'_> {
    fn encode_block(&mut self, bx: usize, by: usize, w: &mut BitWriter) {
        let mut block = [0.0f64; 64];
        for y in 0..8 {
            let row = (by * 8 + y) * self.width + bx * 8;
            for x in 0..8 {
                block[y * 8 + x] = self.plane[row + x] - 128.0;
            }
        }
        dct::forward(&mut block);
        let mut coeffs = [0i32; 64];
        for (k, &nat) in ZIGZAG.iter().enumerate() {
            coeffs[k] = (block[nat] / f64::from(self.quant[nat])).round() as i32;
        }

        let diff = coeffs[0] - self.pred;
        self.pred = coeffs[0];
        let cat = category(diff);
        w.put(self.dc.code[cat as usize], self.dc.size[cat as usize]);
        w.put(magnitude_bits(diff, cat), cat);

        let mut run = 0u8;
        for &c in &coeffs[1..] {
            if c == 0 {
                run += 1;
                continue;
            }
            while run >= 16 {
                w.put(self.ac.code[0xf0], self.ac.size[0xf0]);
                run -= 16;
            }
            let cat = category(c);
            let sym = ((run << 4) | cat) as usize;
            w.put(self.ac.code[sym], self.ac.size[sym]);
            w.put(magnitude_bits(c, cat), cat);
            run = 0;
        }
        if run > 0 {
            w.put(self.ac.code[0], self.ac.size[0]);
        }
    }
}

/// Pads `plane` (w x h) to (pw x ph) by edge replication.
fn pad_plane(plane: &[f64], w: usize, h: usize, pw: usize, ph: usize) -> Vec<f64> {
    let mut out = vec![0.0; pw * ph];
    for y in 0..ph {
        let sy = y.min(h - 1);
        for x in 0..pw {
            out[y * pw + x] = plane[sy * w + x.min(w - 1)];
        }
    }
    out
}

fn write_marker(out: &mut Vec<u8>, marker: u8, payload: &[u8]) {
    out.extend_from_slice(&[0xff, marker]);
    out.extend_from_slice(&((payload.len() + 2) as u16).to_be_bytes());
    out.extend_from_slice(payload);
}

fn dht_payload(class_id: u8, bits: &[u8; 16], vals: &[u8]) -> Vec<u8> {
    let mut p = vec![class_id];
    p.extend_from_slice(bits);
    p.extend_from_slice(vals);
    p
}

/// Encodes `img` as a baseline JFIF stream with IJG-scaled Annex K tables.
pub fn encode(img: &RasterImage, quality: u8, subsampling: ChromaSubsampling) -> Vec<u8> {
    let (w, h) = (img.width(), img.height());
    let (qluma, qchroma) = quant_tables(quality);

    let n = w * h;
    let mut yp = Vec::with_capacity(n);
    let mut cb = Vec::with_capacity(n);
    let mut cr = Vec::with_capacity(n);
    for px in img.data().chunks_exact(3) {
        let (r, g, b) = (f64::from(px[0]), f64::from(px[1]), f64::from(px[2]));
        yp.push(0.299 * r + 0.587 * g + 0.114 * b);
        cb.push(-0.168_735_891_6 * r - 0.331_264_108_4 * g + 0.5 * b + 128.0);
        cr.push(0.5 * r - 0.418_687_589_2 * g - 0.081_312_410_8 * b + 128.0);
    }

    let f = subsampling.luma_factor();
    let mcu = 8 * f;
    let mcux = w.div_ceil(mcu);
    let mcuy = h.div_ceil(mcu);
    let (lw, lh) = (mcux * mcu, mcuy * mcu);
    let (cw, ch) = (mcux * 8, mcuy * 8);

    let chroma = |plane: &[f64]| -> Vec<f64> {
        if f == 1 {
            return pad_plane(plane, w, h, cw, ch);
        }
        let padded = pad_plane(plane, w, h, lw, lh);
        let mut out = vec![0.0; cw * ch];
        for y in 0..ch {
            for x in 0..cw {
                let i = 2 * y * lw + 2 * x;
                out[y * cw + x] =
                    (padded[i] + padded[i + 1] + padded[i + lw] + padded[i + lw + 1]) * 0.25;
            }
        }
        out
    };

    let dc_l = HuffEncoder::new(&DC_LUMA_BITS, &DC_LUMA_VALS);
    let ac_l = HuffEncoder::new(&AC_LUMA_BITS, &AC_LUMA_VALS);
    let dc_c = HuffEncoder::new(&DC_CHROMA_BITS, &DC_CHROMA_VALS);
    let ac_c = HuffEncoder::new(&AC_CHROMA_BITS, &AC_CHROMA_VALS);

    let mut comps = [
        Component {
            plane: pad_plane(&yp, w, h, lw, lh),
            width: lw,
            quant: &qluma,
            dc: &dc_l,
            ac: &ac_l,
            pred: 0,
        },
        Component {
            plane: chroma(&cb),
            width: cw,
            quant: &qchroma,
            dc: &dc_c,
            ac: &ac_c,
            pred: 0,
        },
        Component {
            plane: chroma(&cr),
            width: cw,
            quant: &qchroma,
            dc: &dc_c,
            ac: &ac_c,
            pred: 0,
        },
    ];

    let mut out = vec![0xff, 0xd8];
    write_marker(
        &mut out,
        0xe0,
        &[b'J', b'F', b'I', b'F', 0, 1, 1, 0, 0, 1, 0, 1, 0, 0],
    );
    for (id, table) in [(0u8, &qluma), (1u8, &qchroma)] {
        let mut p = vec![id];
        p.extend(ZIGZAG.iter().map(|&nat| table[nat] as u8));
        write_marker(&mut out, 0xdb, &p);
    }
    let hv = ((f as u8) << 4) | f as u8;
    let mut sof = vec![8];
    sof.extend_from_slice(&(h as u16).to_be_bytes());
    sof.extend_from_slice(&(w as u16).to_be_bytes());
    sof.extend_from_slice(&[3, 1, hv, 0, 2, 0x11, 1, 3, 0x11, 1]);
    write_marker(&mut out, 0xc0, &sof);
    write_marker(
        &mut out,
        0xc4,
        &dht_payload(0x00, &DC_LUMA_BITS, &DC_LUMA_VALS),
    );
    write_marker(
        &mut out,
        0xc4,
        &dht_payload(0x10, &AC_LUMA_BITS, &AC_LUMA_VALS),
    );
    write_marker(
        &mut out,
        0xc4,
        &dht_payload(0x01, &DC_CHROMA_BITS, &DC_CHROMA_VALS),
    );
    write_marker(
        &mut out,
        0xc4,
        &dht_payload(0x11, &AC_CHROMA_BITS, &AC_CHROMA_VALS),
    );
    write_marker(&mut out, 0xda, &[3, 1, 0x00, 2, 0x11, 3, 0x11, 0, 63, 0]);

    let mut bw = BitWriter {
        out,
        acc: 0,
        nbits: 0,
    };
    for my in 0..mcuy {
        for mx in 0..mcux {
            for by in 0..f {
                for bx in 0..f {
                    comps[0].encode_block(mx * f + bx, my * f + by, &mut bw);
                }
            }
            comps[1].encode_block(mx, my, &mut bw);
            comps[2].encode_block(mx, my, &mut bw);
        }
    }
    bw.flush();
    let mut out = bw.out;
    out.extend_from_slice(&[0xff, 0xd9]);
    out
}
