//! FFT convolution: one-shot linear convolution and a streaming overlap-add
//! FIR engine shared by the microphone model and the compensation filter.

use std::f64::consts::PI;
use std::sync::Arc;

use realfft::num_complex::Complex64;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};

/// Forward real FFT of `x` zero-padded (or truncated) to `n` points.
pub fn rfft(x: &[f64], n: usize) -> Vec<Complex64> {
    let mut planner = RealFftPlanner::<f64>::new();
    let r2c = planner.plan_fft_forward(n);
    let mut input = r2c.make_input_vec();
    let m = x.len().min(n);
    input[..m].copy_from_slice(&x[..m]);
    let mut out = r2c.make_output_vec();
    r2c.process(&mut input, &mut out)
        .expect("buffer sizes come from the plan");
    out
}

/// Inverse real FFT, normalised so that `irfft(rfft(x, n), n) == x`.
pub fn irfft(spectrum: &[Complex64], n: usize) -> Vec<f64> {
    let mut planner = RealFftPlanner::<f64>::new();
    let c2r = planner.plan_fft_inverse(n);
    let mut input = spectrum.to_vec();
    input.resize(n / 2 + 1, Complex64::new(0.0, 0.0));
    input[0].im = 0.0;
    if n % 2 == 0 {
        input[n / 2].im = 0.0;
    }
    let mut out = c2r.make_output_vec();
    c2r.process(&mut input, &mut out)
        .expect("buffer sizes come from the plan");
    let scale = 1.0 / n as f64;
    out.iter_mut().for_each(|v| *v *= scale);
    out
}

/// Full linear convolution, length `a.len() + b.len() - 1`.
pub fn fft_convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let out_len = a.len() + b.len() - 1;
    if a.len().min(b.len()) <= 32 {
        let mut out = vec![0.0; out_len];
        for (i, &x) in a.iter().enumerate() {
            for (j, &h) in b.iter().enumerate() {
                out[i + j] += x * h;
            }
        }
        return out;
    }
    let n = out_len.next_power_of_two();
    let fa = rfft(a, n);
    let fb = rfft(b, n);
    let prod: Vec<Complex64> = fa.iter().zip(&fb).map(|(x, y)| x * y).collect();
    let mut out = irfft(&prod, n);
    out.truncate(out_len);
    out
}

/// Complex frequency response of an FIR at `freq_hz`, phase referenced to tap 0.
pub fn fir_response(taps: &[f64], freq_hz: f64, sample_rate_hz: f64) -> Complex64 {
    let w = -2.0 * PI * freq_hz / sample_rate_hz;
    // Rotating phasor: avoids a sin/cos per tap.
    let step = Complex64::from_polar(1.0, w);
    let mut phasor = Complex64::new(1.0, 0.0);
    let mut acc = Complex64::new(0.0, 0.0);
    for (n, &h) in taps.iter().enumerate() {
        if n % 1024 == 0 {
            phasor = Complex64::from_polar(1.0, w * n as f64);
        }
        acc += phasor * h;
        phasor *= step;
    }
    acc
}

pub fn fir_magnitude_db(taps: &[f64], freq_hz: f64, sample_rate_hz: f64) -> f64 {
    20.0 * fir_response(taps, freq_hz, sample_rate_hz).norm().max(1e-30).log10()
}

/// Streaming overlap-add convolution with a fixed impulse response.
///
/// Output is the causal convolution `y[n] = sum_k h[k] x[n-k]`. Samples are
/// released one block at a time; `finish` flushes the partial block and the
/// convolution tail.
pub struct OverlapAdd {
    taps_len: usize,
    block: usize,
    fft_len: usize,
    kernel: Vec<Complex64>,
    r2c: Arc<dyn RealToComplex<f64>>,
    c2r: Arc<dyn ComplexToReal<f64>>,
    pending: Vec<f64>,
    overlap: Vec<f64>,
    time_buf: Vec<f64>,
    freq_buf: Vec<Complex64>,
}

impl OverlapAdd {
    pub fn new(taps: &[f64]) -> Self {
        assert!(!taps.is_empty(), "impulse response must not be empty");
        let taps_len = taps.len();
        let fft_len = (4 * taps_len).next_power_of_two().max(1024);
        let block = fft_len - taps_len + 1;
        let mut planner = RealFftPlanner::<f64>::new();
        let r2c = planner.plan_fft_forward(fft_len);
        let c2r = planner.plan_fft_inverse(fft_len);
        let scale = 1.0 / fft_len as f64;
        let kernel = rfft(taps, fft_len)
            .into_iter()
            .map(|c| c * scale)
            .collect();
        Self {
            taps_len,
            block,
            fft_len,
            kernel,
            freq_buf: r2c.make_output_vec(),
            time_buf: r2c.make_input_vec(),
            r2c,
            c2r,
            pending: Vec::with_capacity(block),
            overlap: vec![0.0; taps_len - 1],
        }
    }

    pub fn taps_len(&self) -> usize {
        self.taps_len
    }

    /// Feeds input and appends every completed output sample to `out`.
    pub fn process_into(&mut self, mut input: &[f64], out: &mut Vec<f64>) {
        while !input.is_empty() {
            let take = (self.block - self.pending.len()).min(input.len());
            self.pending.extend_from_slice(&input[..take]);
            input = &input[take..];
            if self.pending.len() == self.block {
                self.run_block(out, self.block);
            }
        }
    }

    pub fn process(&mut self, input: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(input.len() + self.block);
        self.process_into(input, &mut out);
        out
    }

    /// Flushes the buffered partial block plus the `taps_len - 1` tail.
    pub fn finish(&mut self) -> Vec<f64> {
        let mut out = Vec::new();
        let n = self.pending.len();
        if n > 0 {
            self.run_block(&mut out, n);
        }
        out.extend(self.overlap.drain(..));
        self.overlap = vec![0.0; self.taps_len - 1];
        out
    }

    fn run_block(&mut self, out: &mut Vec<f64>, n: usize) {
        self.time_buf.iter_mut().for_each(|v| *v = 0.0);
        self.time_buf[..n].copy_from_slice(&self.pending[..n]);
        self.pending.clear();
        self.r2c
            .process(&mut self.time_buf, &mut self.freq_buf)
            .expect("plan sizes");
        for (x, k) in self.freq_buf.iter_mut().zip(&self.kernel) {
            *x *= k;
        }
        self.freq_buf[0].im = 0.0;
        self.freq_buf[self.fft_len / 2].im = 0.0;
        self.c2r
            .process(&mut self.freq_buf, &mut self.time_buf)
            .expect("plan sizes");
        let tail = self.taps_len - 1;
        for (i, o) in self.overlap.iter().enumerate() {
            self.time_buf[i] += o;
        }
        out.extend_from_slice(&self.time_buf[..n]);
        // Carry everything past the released samples into the next block.
        let mut next = vec![0.0; tail];
        let avail = (n + tail).min(self.fft_len);
        next[..avail - n].copy_from_slice(&self.time_buf[n..avail]);
        self.overlap = next;
    }
}

/// FIR stream whose output is shifted earlier by `delay` samples so the total
/// output length equals the total input length.
///
/// With `delay = (len - 1) / 2` on a symmetric filter this removes the linear
/// phase group delay; with `delay = 0` it is a plain causal filter truncated to
/// the input length.
pub struct AlignedFir {
    engine: OverlapAdd,
    to_skip: usize,
    fed: usize,
    emitted: usize,
}

impl AlignedFir {
    pub fn new(taps: &[f64], delay: usize) -> Self {
        assert!(delay < taps.len(), "delay must be inside the impulse response");
        Self {
            engine: OverlapAdd::new(taps),
            to_skip: delay,
            fed: 0,
            emitted: 0,
        }
    }

    pub fn process_into(&mut self, input: &[f64], out: &mut Vec<f64>) {
        self.fed += input.len();
        let start = out.len();
        self.engine.process_into(input, out);
        self.drop_skipped(out, start);
    }

    pub fn process(&mut self, input: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(input.len());
        self.process_into(input, &mut out);
        out
    }

    /// Releases the remaining samples so the stream's total output equals its input.
    pub fn finish(&mut self) -> Vec<f64> {
        let mut out = self.engine.finish();
        self.drop_skipped(&mut out, 0);
        out
    }

    fn drop_skipped(&mut self, out: &mut Vec<f64>, start: usize) {
        let produced = out.len() - start;
        let skip = self.to_skip.min(produced);
        if skip > 0 {
            out.drain(start..start + skip);
            self.to_skip -= skip;
        }
        // Never release more than was fed.
        let allowed = self.fed - self.emitted;
        let produced = out.len() - start;
        if produced > allowed {
            out.truncate(start + allowed);
        }
        self.emitted += out.len() - start;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct(x: &[f64], h: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; x.len() + h.len() - 1];
        for (i, a) in x.iter().enumerate() {
            for (j, b) in h.iter().enumerate() {
                y[i + j] += a * b;
            }
        }
        y
    }

    fn lcg(n: usize, mut s: u64) -> Vec<f64> {
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn fft_convolve_matches_direct() {
        let x = lcg(3000, 1);
        let h = lcg(257, 2);
        let a = fft_convolve(&x, &h);
        let b = direct(&x, &h);
        assert_eq!(a.len(), b.len());
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn overlap_add_matches_direct_for_odd_chunking() {
        let x = lcg(20_000, 3);
        let h = lcg(301, 4);
        let mut ola = OverlapAdd::new(&h);
        let mut out = Vec::new();
        for chunk in x.chunks(777) {
            ola.process_into(chunk, &mut out);
        }
        out.extend(ola.finish());
        let expect = direct(&x, &h);
        assert_eq!(out.len(), expect.len());
        for (p, q) in out.iter().zip(&expect) {
            assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn aligned_fir_removes_delay_and_keeps_length() {
        let x = lcg(5000, 5);
        let h = lcg(101, 6);
        let delay = 50;
        let mut fir = AlignedFir::new(&h, delay);
        let mut out = Vec::new();
        for chunk in x.chunks(333) {
            fir.process_into(chunk, &mut out);
        }
        out.extend(fir.finish());
        let full = direct(&x, &h);
        assert_eq!(out.len(), x.len());
        for (n, v) in out.iter().enumerate() {
            assert!((v - full[n + delay]).abs() < 1e-9);
        }
    }

    #[test]
    fn fir_response_of_delta_is_unity() {
        let mut h = vec![0.0; 9];
        h[4] = 1.0;
        let r = fir_response(&h, 1234.0, 44_100.0);
        assert!((r.norm() - 1.0).abs() < 1e-12);
    }
}
