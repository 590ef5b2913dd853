//! Baseline sequential JPEG decoder with an accurate floating-point IDCT.

use super::dct;
use super::tables::ZIGZAG;
use crate::error::{Error, Result};
use crate::image::RasterImage;

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptStream(msg.into())
}

#[derive(Clone)]
struct HuffDecoder {
    maxcode: [i32; 17],
    valptr: [i32; 17],
    mincode: [i32; 17],
    vals: Vec<u8>,
}

impl HuffDecoder {
    fn new(bits: &[u8; 16], vals: Vec<u8>) -> Result<Self> {
        let total: usize = bits.iter().map(|&b| b as usize).sum();
        if total != vals.len() || total > 256 {
            return Err(corrupt("huffman table size mismatch"));
        }
        let mut maxcode = [-1i32; 17];
        let mut valptr = [0i32; 17];
        let mut mincode = [0i32; 17];
        let mut code = 0i32;
        let mut k = 0i32;
        for len in 1..=16 {
            let n = i32::from(bits[len - 1]);
            if n > 0 {
                valptr[len] = k;
                mincode[len] = code;
                code += n;
                k += n;
                maxcode[len] = code - 1;
            }
            if code > (1 << len) {
                return Err(corrupt("over-subscribed huffman table"));
            }
            code <<= 1;
        }
        Ok(HuffDecoder {
            maxcode,
            valptr,
            mincode,
            vals,
        })
    }

    fn decode(&self, r: &mut BitReader) -> Result<u8> {
        let mut code = 0i32;
        for len in 1..=16 {
            code = (code << 1) | r.bit()? as i32;
            if code <= self.maxcode[len] {
                let idx = self.valptr[len] + code - self.mincode[len];
                return Ok(self.vals[idx as usize]);
            }
        }
        Err(corrupt("invalid huffman code"))
    }
}

struct BitReader<'a> {
    data: &'a [u8],
    pos: usize,
    byte: u8,
    left: u8,
}

impl<'a> BitReader<'a> {
    fn new(data: &'a [u8], pos: usize) -> Self {
        BitReader {
            data,
            pos,
            byte: 0,
            left: 0,
        }
    }

    fn bit(&mut self) -> Result<u32> {
        if self.left == 0 {
            let b = *self
                .data
                .get(self.pos)
                .ok_or_else(|| corrupt("truncated entropy-coded segment"))?;
            if b == 0xff {
                match self.data.get(self.pos + 1) {
                    Some(0) => self.pos += 2,
                    _ => return Err(corrupt("marker inside entropy-coded segment")),
                }
            } else {
                self.pos += 1;
            }
            self.byte = b;
            self.left = 8;
        }
        self.left -= 1;
        Ok(u32::from((self.byte >> self.left) & 1))
    }

    fn bits(&mut self, n: u8) -> Result<i32> {
        let mut v = 0i32;
        for _ in 0..n {
            v = (v << 1) | self.bit()? as i32;
        }
        Ok(v)
    }

    /// Discards the partial byte and consumes an expected RSTn marker.
    fn restart(&mut self) -> Result<()> {
        self.left = 0;
        match (self.data.get(self.pos), self.data.get(self.pos + 1)) {
            (Some(0xff), Some(m)) if (0xd0..=0xd7).contains(m) => {
                self.pos += 2;
                Ok(())
            }
            _ => Err(corrupt("missing restart marker")),
        }
    }
}

fn extend(v: i32, s: u8) -> i32 {
    if s == 0 {
        0
    } else if v < (1 << (s - 1)) {
        v - (1 << s) + 1
    } else {
        v
    }
}

struct FrameComponent {
    id: u8,
    h: usize,
    v: usize,
    tq: usize,
    blocks_w: usize,
    blocks_h: usize,
    coeffs: Vec<[i32; 64]>,
}

struct Frame {
    width: usize,
    height: usize,
    hmax: usize,
    vmax: usize,
    mcux: usize,
    mcuy: usize,
    comps: Vec<FrameComponent>,
}

struct Decoder<'a> {
    data: &'a [u8],
    pos: usize,
    qt: [Option<[u16; 64]>; 4],
    dc: [Option<HuffDecoder>; 4],
    ac: [Option<HuffDecoder>; 4],
    restart_interval: usize,
    frame: Option<Frame>,
}

impl<'a> Decoder<'a> {
    fn u8(&mut self) -> Result<u8> {
        let b = *self
            .data
            .get(self.pos)
            .ok_or_else(|| corrupt("unexpected end of stream"))?;
        self.pos += 1;
        Ok(b)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from(self.u8()?) << 8 | u16::from(self.u8()?))
    }

    fn segment(&mut self) -> Result<&'a [u8]> {
        let len = self.u16()? as usize;
        if len < 2 || self.pos + len - 2 > self.data.len() {
            return Err(corrupt("bad segment length"));
        }
        let seg = &self.data[self.pos..self.pos + len - 2];
        self.pos += len - 2;
        Ok(seg)
    }

    fn next_marker(&mut self) -> Result<u8> {
        if self.u8()? != 0xff {
            return Err(corrupt("expected marker"));
        }
        let mut m = self.u8()?;
        while m == 0xff {
            m = self.u8()?;
        }
        Ok(m)
    }

    fn read_dqt(&mut self) -> Result<()> {
        let seg = self.segment()?;
        let mut i = 0;
        while i < seg.len() {
            let pq = seg[i] >> 4;
            let tq = (seg[i] & 15) as usize;
            i += 1;
            if tq > 3 || pq > 1 {
                return Err(corrupt("bad quantization table header"));
            }
            let mut table = [0u16; 64];
            for &nat in ZIGZAG.iter() {
                let v = if pq == 0 {
                    u16::from(*seg.get(i).ok_or_else(|| corrupt("short DQT"))?)
                } else {
                    let hi = *seg.get(i).ok_or_else(|| corrupt("short DQT"))?;
                    let lo = *seg.get(i + 1).ok_or_else(|| corrupt("short DQT"))?;
                    i += 1;
                    u16::from(hi) << 8 | u16::from(lo)
                };
                i += 1;
                table[nat] = v;
            }
            self.qt[tq] = Some(table);
        }
        Ok(())
    }

    fn read_dht(&mut self) -> Result<()> {
        let seg = self.segment()?;
        let mut i = 0;
        while i < seg.len() {
            if i + 17 > seg.len() {
                return Err(corrupt("short DHT"));
            }
            let class = seg[i] >> 4;
            let th = (seg[i] & 15) as usize;
            if class > 1 || th > 3 {
                return Err(corrupt("bad huffman table header"));
            }
            let mut bits = [0u8; 16];
            bits.copy_from_slice(&seg[i + 1..i + 17]);
            let n: usize = bits.iter().map(|&b| b as usize).sum();
            i += 17;
            if i + n > seg.len() {
                return Err(corrupt("short DHT"));
            }
            let table = HuffDecoder::new(&bits, seg[i..i + n].to_vec())?;
            i += n;
            if class == 0 {
                self.dc[th] = Some(table);
            } else {
                self.ac[th] = Some(table);
            }
        }
        Ok(())
    }

    fn read_sof(&mut self) -> Result<()> {
        let seg = self.segment()?;
        if seg.len() < 6 {
            return Err(corrupt("short SOF"));
        }
        if seg[0] != 8 {
            return Err(Error::UnsupportedFormat(format!(
                "{}-bit JPEG samples",
                seg[0]
            )));
        }
        let height = usize::from(u16::from_be_bytes([seg[1], seg[2]]));
        let width = usize::from(u16::from_be_bytes([seg[3], seg[4]]));
        let n = seg[5] as usize;
        if n != 3 {
            return Err(Error::UnsupportedFormat(format!(
                "JPEG with {n} components (RGB required)"
            )));
        }
        if width == 0 || height == 0 {
            return Err(corrupt("zero image dimension"));
        }
        if seg.len() < 6 + 3 * n {
            return Err(corrupt("short SOF"));
        }
        let mut comps = Vec::with_capacity(n);
        for c in 0..n {
            let b = &seg[6 + 3 * c..9 + 3 * c];
            let (h, v) = ((b[1] >> 4) as usize, (b[1] & 15) as usize);
            if !(1..=4).contains(&h) || !(1..=4).contains(&v) || b[2] > 3 {
                return Err(corrupt("bad component sampling"));
            }
            comps.push(FrameComponent {
                id: b[0],
                h,
                v,
                tq: b[2] as usize,
                blocks_w: 0,
                blocks_h: 0,
                coeffs: Vec::new(),
            });
        }
        let hmax = comps.iter().map(|c| c.h).max().unwrap_or(1);
        let vmax = comps.iter().map(|c| c.v).max().unwrap_or(1);
        let mcux = width.div_ceil(8 * hmax);
        let mcuy = height.div_ceil(8 * vmax);
        for c in comps.iter_mut() {
            c.blocks_w = mcux * c.h;
            c.blocks_h = mcuy * c.v;
            c.coeffs = vec![[0; 64]; c.blocks_w * c.blocks_h];
        }
        self.frame = Some(Frame {
            width,
            height,
            hmax,
            vmax,
            mcux,
            mcuy,
            comps,
        });
        Ok(())
    }

    fn read_scan(&mut self) -> Result<()> {
        let seg = self.segment()?;
        let frame = self
            .frame
            .as_mut()
            .ok_or_else(|| corrupt("scan before frame header"))?;
        let ns = *seg.first().ok_or_else(|| corrupt("short SOS"))? as usize;
        if ns == 0 || ns > 4 || seg.len() < 1 + 2 * ns + 3 {
            return Err(corrupt("bad SOS"));
        }
        let mut members = Vec::with_capacity(ns);
        for s in 0..ns {
            let id = seg[1 + 2 * s];
            let tables = seg[2 + 2 * s];
            let ci = frame
                .comps
                .iter()
                .position(|c| c.id == id)
                .ok_or_else(|| corrupt("scan references unknown component"))?;
            let (td, ta) = ((tables >> 4) as usize, (tables & 15) as usize);
            if td > 3 || ta > 3 || self.dc[td].is_none() || self.ac[ta].is_none() {
                return Err(corrupt("scan references undefined huffman table"));
            }
            members.push((ci, td, ta));
        }
        let tail = &seg[1 + 2 * ns..];
        if tail[0] != 0 || tail[1] != 63 || tail[2] != 0 {
            return Err(Error::UnsupportedFormat("non-sequential scan".into()));
        }

        let mut reader = BitReader::new(self.data, self.pos);
        let mut preds = vec![0i32; ns];
        let decode_block = |reader: &mut BitReader,
                            dc: &HuffDecoder,
                            ac: &HuffDecoder,
                            pred: &mut i32,
                            out: &mut [i32; 64]|
         -> Result<()> {
            let t = dc.decode(reader)?;
            if t > 11 {
                return Err(corrupt("bad DC magnitude"));
            }
            *pred += extend(reader.bits(t)?, t);
            out[0] = *pred;
            let mut k = 1;
            while k < 64 {
                let rs = ac.decode(reader)?;
                let (r, s) = ((rs >> 4) as usize, rs & 15);
                if s == 0 {
                    if r == 15 {
                        k += 16;
                        continue;
                    }
                    break;
                }
                k += r;
                if k > 63 {
                    return Err(corrupt("AC coefficient index out of range"));
                }
                out[ZIGZAG[k]] = extend(reader.bits(s)?, s);
                k += 1;
            }
            Ok(())
        };

        let dc = &self.dc;
        let ac = &self.ac;
        let restart = self.restart_interval;
        if ns == 1 {
            let (ci, td, ta) = members[0];
            let c = &mut frame.comps[ci];
            let cw = (frame.width * c.h).div_ceil(frame.hmax).div_ceil(8);
            let chh = (frame.height * c.v).div_ceil(frame.vmax).div_ceil(8);
            let mut count = 0;
            for by in 0..chh {
                for bx in 0..cw {
                    if restart > 0 && count > 0 && count % restart == 0 {
                        reader.restart()?;
                        preds[0] = 0;
                    }
                    let mut block = [0i32; 64];
                    decode_block(
                        &mut reader,
                        dc[td].as_ref().unwrap(),
                        ac[ta].as_ref().unwrap(),
                        &mut preds[0],
                        &mut block,
                    )?;
                    c.coeffs[by * c.blocks_w + bx] = block;
                    count += 1;
                }
            }
        } else {
            let mut count = 0;
            for my in 0..frame.mcuy {
                for mx in 0..frame.mcux {
                    if restart > 0 && count > 0 && count % restart == 0 {
                        reader.restart()?;
                        preds.iter_mut().for_each(|p| *p = 0);
                    }
                    for (s, &(ci, td, ta)) in members.iter().enumerate() {
                        let c = &mut frame.comps[ci];
                        for v in 0..c.v {
                            for h in 0..c.h {
                                let mut block = [0i32; 64];
                                decode_block(
                                    &mut reader,
                                    dc[td].as_ref().unwrap(),
                                    ac[ta].as_ref().unwrap(),
                                    &mut preds[s],
                                    &mut block,
                                )?;
                                let idx = (my * c.v + v) * c.blocks_w + mx * c.h + h;
                                c.coeffs[idx] = block;
                            }
                        }
                    }
                    count += 1;
                }
            }
        }
        self.pos = reader.pos;
        // Skip any padding up to the next marker.
        while self.pos + 1 < self.data.len()
            && !(self.data[self.pos] == 0xff && self.data[self.pos + 1] != 0)
        {
            self.pos += 1;
        }
        Ok(())
    }

    /// Dequantizes, inverse-transforms and upsamples every component to
    /// full resolution. Returns (width, height, planes).
    fn finish(self) -> Result<(usize, usize, Vec<Vec<u8>>)> {
        let frame = self.frame.ok_or_else(|| corrupt("no frame header"))?;
        let mut planes = Vec::with_capacity(frame.comps.len());
        for c in &frame.comps {
            let q = self.qt[c.tq]
                .as_ref()
                .ok_or_else(|| corrupt("undefined quantization table"))?;
            let pw = c.blocks_w * 8;
            let mut plane = vec![0u8; pw * c.blocks_h * 8];
            for by in 0..c.blocks_h {
                for bx in 0..c.blocks_w {
                    let coeffs = &c.coeffs[by * c.blocks_w + bx];
                    let mut block = [0.0f64; 64];
                    for i in 0..64 {
                        block[i] = f64::from(coeffs[i]) * f64::from(q[i]);
                    }
                    dct::inverse(&mut block);
                    for y in 0..8 {
                        let row = (by * 8 + y) * pw + bx * 8;
                        for x in 0..8 {
                            plane[row + x] =
                                (block[y * 8 + x] + 128.0).round().clamp(0.0, 255.0) as u8;
                        }
                    }
                }
            }
            let cw = (frame.width * c.h).div_ceil(frame.hmax);
            let ch = (frame.height * c.v).div_ceil(frame.vmax);
            planes.push(upsample(
                &plane,
                pw,
                cw,
                ch,
                frame.hmax / c.h,
                frame.vmax / c.v,
                frame.width,
                frame.height,
            ));
        }
        Ok((frame.width, frame.height, planes))
    }
}

/// Upsamples a component plane (stride `pw`, valid size `cw x ch`) to
/// `w x h`. 2:1 factors use libjpeg-style triangle filtering.
#[allow(clippy::too_many_arguments)]
fn upsample(
    plane: &[u8],
    pw: usize,
    cw: usize,
    ch: usize,
    fx: usize,
    fy: usize,
    w: usize,
    h: usize,
) -> Vec<u8> {
    let at = |x: usize, y: usize| i32::from(plane[y.min(ch - 1) * pw + x.min(cw - 1)]);
    let mut out = vec![0u8; w * h];
    match (fx, fy) {
        (1, 1) => {
            for y in 0..h {
                for x in 0..w {
                    out[y * w + x] = at(x, y) as u8;
                }
            }
        }
        (2, 2) => {
            for y in 0..h {
                let iy = y / 2;
                let ny = if y % 2 == 0 {
                    iy.saturating_sub(1)
                } else {
                    iy + 1
                };
                let colsum = |c: usize| 3 * at(c, iy) + at(c, ny);
                for x in 0..w {
                    let ix = x / 2;
                    let this = colsum(ix);
                    let v = if x % 2 == 0 {
                        (3 * this + colsum(ix.saturating_sub(1)) + 8) >> 4
                    } else {
                        (3 * this + colsum(ix + 1) + 7) >> 4
                    };
                    out[y * w + x] = v as u8;
                }
            }
        }
        (2, 1) => {
            for y in 0..h {
                for x in 0..w {
                    let ix = x / 2;
                    let v = if x % 2 == 0 {
                        (3 * at(ix, y) + at(ix.saturating_sub(1), y) + 1) >> 2
                    } else {
                        (3 * at(ix, y) + at(ix + 1, y) + 2) >> 2
                    };
                    out[y * w + x] = v as u8;
                }
            }
        }
        _ => {
            for y in 0..h {
                for x in 0..w {
                    out[y * w + x] = at(x / fx, y / fy) as u8;
                }
            }
        }
    }
    out
}

/// Decodes a baseline JPEG stream into an RGB raster.
pub fn decode(data: &[u8]) -> Result<RasterImage> {
    let (w, h, planes) = decode_planes(data)?;
    let mut out = Vec::with_capacity(w * h * 3);
    for i in 0..w * h {
        let y = f64::from(planes[0][i]);
        let cb = f64::from(planes[1][i]) - 128.0;
        let cr = f64::from(planes[2][i]) - 128.0;
        let px = [
            y + 1.402 * cr,
            y - 0.344_136_286_2 * cb - 0.714_136_286_2 * cr,
            y + 1.772 * cb,
        ];
        out.extend(px.iter().map(|v| v.round().clamp(0.0, 255.0) as u8));
    }
    RasterImage::new(w, h, out)
}

/// Decodes to interleaved full-resolution YCbCr samples (no color
/// conversion). Returns (width, height, samples).
pub fn decode_ycbcr(data: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let (w, h, planes) = decode_planes(data)?;
    let mut out = Vec::with_capacity(w * h * 3);
    for i in 0..w * h {
        out.extend(planes.iter().map(|p| p[i]));
    }
    Ok((w, h, out))
}

fn decode_planes(data: &[u8]) -> Result<(usize, usize, Vec<Vec<u8>>)> {
    if data.len() < 4 || data[0] != 0xff || data[1] != 0xd8 {
        return Err(Error::UnsupportedFormat("missing JPEG SOI marker".into()));
    }
    let mut dec = Decoder {
        data,
        pos: 2,
        qt: [None; 4],
        dc: [None, None, None, None],
        ac: [None, None, None, None],
        restart_interval: 0,
        frame: None,
    };
    let mut scanned = false;
    loop {
        let marker = dec.next_marker()?;
        match marker {
            0xd9 => break,
            0xc0 | 0xc1 => {
                if dec.frame.is_some() {
                    return Err(corrupt("multiple frame headers"));
                }
                dec.read_sof()?
            }
            0xc2 | 0xc3 | 0xc5..=0xc7 | 0xc9..=0xcb | 0xcd..=0xcf => {
                return Err(Error::UnsupportedFormat(format!(
                    "JPEG process SOF{}",
                    marker - 0xc0
                )))
            }
            0xc4 => dec.read_dht()?,
            0xdb => dec.read_dqt()?,
            0xdd => {
                let seg = dec.segment()?;
                if seg.len() != 2 {
                    return Err(corrupt("bad DRI"));
                }
                dec.restart_interval = usize::from(u16::from_be_bytes([seg[0], seg[1]]));
            }
            0xda => {
                dec.read_scan()?;
                scanned = true;
            }
            0xd0..=0xd7 => return Err(corrupt("stray restart marker")),
            0x01 => {}
            _ => {
                dec.segment()?;
            }
        }
    }
    if !scanned {
        return Err(corrupt("no scan data"));
    }
    dec.finish()
}
