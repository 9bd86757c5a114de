//! `.stfc` container: a little-endian header followed by fixed-width token
//! indices packed least-significant-bit first.
//!
//! Header layout (byte offsets):
//!
//! | field                  | type      |
//! |------------------------|-----------|
//! | magic `STFC`           | 4 bytes   |
//! | version                | u8        |
//! | sample rate            | u32       |
//! | hop length             | u16       |
//! | FFT size               | u16       |
//! | window length          | u16       |
//! | downsample ratio       | u8        |
//! | codebook count `n`     | u8        |
//! | codebook sizes         | n x u16   |
//! | latent frames          | u32       |
//! | original sample count  | u64       |
//! | model hash             | 16 bytes  |
//!
//! The payload stores, for each latent frame in order, one index per stage
//! in `log2(size)` bits, then zero bits up to the next byte boundary.

use std::path::Path;

use crate::audio::{read_wav, Audio};
use crate::codec::{hex, CodecModel};
use crate::error::{bail, Error, Result};
use crate::quantizer::TokenMatrix;

pub const MAGIC: [u8; 4] = *b"STFC";
pub const VERSION: u8 = 1;
/// Header bytes excluding the codebook size table.
pub const FIXED_HEADER_LEN: usize = 45;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitstreamHeader {
    pub version: u8,
    pub sample_rate: u32,
    pub hop_length: u16,
    pub fft_size: u16,
    pub win_length: u16,
    pub downsample_ratio: u8,
    pub codebook_sizes: Vec<u16>,
    pub num_latent_frames: u32,
    pub original_num_samples: u64,
    pub model_hash: [u8; 16],
}

fn sizes_bits(sizes: &[u16]) -> Vec<u32> {
    sizes.iter().map(|s| s.trailing_zeros()).collect()
}

impl BitstreamHeader {
    pub fn len(&self) -> usize {
        FIXED_HEADER_LEN + 2 * self.codebook_sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn num_codebooks(&self) -> usize {
        self.codebook_sizes.len()
    }

    pub fn bits_per_frame(&self) -> u64 {
        sizes_bits(&self.codebook_sizes).iter().map(|&b| b as u64).sum()
    }

    pub fn payload_bits(&self) -> u64 {
        self.num_latent_frames as u64 * self.bits_per_frame()
    }

    pub fn payload_len(&self) -> usize {
        self.payload_bits().div_ceil(8) as usize
    }

    pub fn bitrate(&self) -> f64 {
        bitrate_from_bits(
            self.bits_per_frame(),
            self.sample_rate,
            self.hop_length as usize,
            self.downsample_ratio as usize,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != VERSION {
            bail!(Corrupt, "unsupported bitstream version {}", self.version);
        }
        if self.sample_rate == 0 || self.hop_length == 0 || self.fft_size == 0 || self.win_length == 0 {
            bail!(Corrupt, "header has a zero sample rate or frame size");
        }
        if self.downsample_ratio == 0 || !self.downsample_ratio.is_power_of_two() {
            bail!(Corrupt, "downsample ratio {} is not a power of two", self.downsample_ratio);
        }
        if self.codebook_sizes.is_empty() {
            bail!(Corrupt, "header lists no codebooks");
        }
        if let Some(s) = self.codebook_sizes.iter().find(|&&s| s < 2 || !s.is_power_of_two()) {
            bail!(Corrupt, "codebook size {s} is not a power of two >= 2");
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(self.len());
        b.extend_from_slice(&MAGIC);
        b.push(self.version);
        b.extend_from_slice(&self.sample_rate.to_le_bytes());
        b.extend_from_slice(&self.hop_length.to_le_bytes());
        b.extend_from_slice(&self.fft_size.to_le_bytes());
        b.extend_from_slice(&self.win_length.to_le_bytes());
        b.push(self.downsample_ratio);
        b.push(self.codebook_sizes.len() as u8);
        for s in &self.codebook_sizes {
            b.extend_from_slice(&s.to_le_bytes());
        }
        b.extend_from_slice(&self.num_latent_frames.to_le_bytes());
        b.extend_from_slice(&self.original_num_samples.to_le_bytes());
        b.extend_from_slice(&self.model_hash);
        b
    }

    /// Parses and validates a header from the start of `bytes`.
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            bail!(Corrupt, "not an STFC stream (bad magic)");
        }
        let version = r.u8()?;
        let sample_rate = r.u32()?;
        let hop_length = r.u16()?;
        let fft_size = r.u16()?;
        let win_length = r.u16()?;
        let downsample_ratio = r.u8()?;
        let n = r.u8()? as usize;
        let codebook_sizes = (0..n).map(|_| r.u16()).collect::<Result<Vec<_>>>()?;
        let num_latent_frames = r.u32()?;
        let original_num_samples = r.u64()?;
        let model_hash: [u8; 16] = r.take(16)?.try_into().expect("16 bytes");
        let h = Self {
            version,
            sample_rate,
            hop_length,
            fft_size,
            win_length,
            downsample_ratio,
            codebook_sizes,
            num_latent_frames,
            original_num_samples,
            model_hash,
        };
        h.validate()?;
        Ok(h)
    }

    /// Human-readable description, ending with the bitrate line.
    pub fn describe(&self) -> String {
        format!(
            "version: {}\nsample_rate: {} Hz\nhop_length: {}\nfft_size: {}\nwin_length: {}\n\
             downsample_ratio: {}\ncodebooks: {}\ncodebook_sizes: {:?}\nlatent_frames: {}\n\
             samples: {}\nmodel_hash: {}\nbitrate: {} bps\n",
            self.version,
            self.sample_rate,
            self.hop_length,
            self.fft_size,
            self.win_length,
            self.downsample_ratio,
            self.codebook_sizes.len(),
            self.codebook_sizes,
            self.num_latent_frames,
            self.original_num_samples,
            hex(&self.model_hash),
            self.bitrate()
        )
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            bail!(Corrupt, "truncated header at byte {}", self.pos);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn bitrate_from_bits(bits_per_frame: u64, sample_rate: u32, hop: usize, ds: usize) -> f64 {
    sample_rate as f64 / (hop * ds) as f64 * bits_per_frame as f64
}

/// Bits per second: `sample_rate / (hop * ds) * Σ log2(size)`.
pub fn bitrate(sizes: &[usize], sample_rate: u32, hop: usize, ds: usize) -> f64 {
    let bits: u64 = sizes.iter().map(|s| s.ilog2() as u64).sum();
    bitrate_from_bits(bits, sample_rate, hop, ds)
}

/// Frame-major, stage-minor fixed-width packing, LSB first.
pub fn pack_tokens(tokens: &TokenMatrix, sizes: &[u16]) -> Result<Vec<u8>> {
    let sizes_usize: Vec<usize> = sizes.iter().map(|&s| s as usize).collect();
    tokens.check(&sizes_usize)?;
    let bits = sizes_bits(sizes);
    let total: u64 = tokens.num_frames() as u64 * bits.iter().map(|&b| b as u64).sum::<u64>();
    let mut out = vec![0u8; total.div_ceil(8) as usize];
    let mut pos = 0usize;
    for m in 0..tokens.num_frames() {
        for (i, &w) in bits.iter().enumerate() {
            let v = tokens.get(i, m);
            for b in 0..w as usize {
                if (v >> b) & 1 == 1 {
                    out[pos / 8] |= 1 << (pos % 8);
                }
                pos += 1;
            }
        }
    }
    Ok(out)
}

/// Inverse of [`pack_tokens`]. The payload must have exactly the expected
/// length and zero padding bits.
pub fn unpack_tokens(payload: &[u8], sizes: &[u16], frames: usize) -> Result<TokenMatrix> {
    let bits = sizes_bits(sizes);
    let per_frame: u64 = bits.iter().map(|&b| b as u64).sum();
    let total = frames as u64 * per_frame;
    let expected = total.div_ceil(8);
    if payload.len() as u64 != expected {
        bail!(
            Corrupt,
            "payload has {} bytes; {frames} frames need {expected}",
            payload.len()
        );
    }
    let n = sizes.len();
    let mut data = vec![0u32; n * frames];
    let mut pos = 0usize;
    for m in 0..frames {
        for (i, &w) in bits.iter().enumerate() {
            let mut v = 0u32;
            for b in 0..w as usize {
                v |= (((payload[pos / 8] >> (pos % 8)) & 1) as u32) << b;
                pos += 1;
            }
            data[i * frames + m] = v;
        }
    }
    for p in pos..payload.len() * 8 {
        if (payload[p / 8] >> (p % 8)) & 1 == 1 {
            bail!(Corrupt, "non-zero padding bit at payload bit {p}");
        }
    }
    let tokens = TokenMatrix::new(n, frames, data)?;
    tokens.check(&sizes.iter().map(|&s| s as usize).collect::<Vec<_>>())?;
    Ok(tokens)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitstream {
    pub header: BitstreamHeader,
    pub tokens: TokenMatrix,
}

impl Bitstream {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut b = self.header.to_bytes();
        b.extend(pack_tokens(&self.tokens, &self.header.codebook_sizes)?);
        Ok(b)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = BitstreamHeader::parse(bytes)?;
        let payload = &bytes[header.len()..];
        let tokens = unpack_tokens(payload, &header.codebook_sizes, header.num_latent_frames as usize)?;
        Ok(Self { header, tokens })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn bitrate(&self) -> f64 {
        self.header.bitrate()
    }
}

fn narrow<T: TryFrom<usize>>(v: usize, what: &str) -> Result<T> {
    T::try_from(v).map_err(|_| Error::InvalidInput(format!("{what} {v} does not fit the bitstream header")))
}

/// Encodes in-memory audio with the first `codebooks` stages (all when
/// `None`).
pub fn encode_audio(audio: &Audio, model: &CodecModel, codebooks: Option<usize>) -> Result<Bitstream> {
    let cfg = model.config();
    if audio.sample_rate != cfg.stft.sample_rate {
        bail!(
            Data,
            "audio is {} Hz but the model expects {} Hz",
            audio.sample_rate,
            cfg.stft.sample_rate
        );
    }
    let n = codebooks.unwrap_or(cfg.quantizer.num_codebooks);
    let spec = cfg.quantizer.truncated(n)?;
    let tokens = model.encode(&audio.samples, n)?;
    let header = BitstreamHeader {
        version: VERSION,
        sample_rate: cfg.stft.sample_rate,
        hop_length: narrow(cfg.stft.hop_length, "hop length")?,
        fft_size: narrow(cfg.stft.fft_size, "fft size")?,
        win_length: narrow(cfg.stft.win_length, "window length")?,
        downsample_ratio: narrow(cfg.generator.downsample_ratio(), "downsample ratio")?,
        codebook_sizes: spec
            .sizes
            .iter()
            .map(|&s| narrow(s, "codebook size"))
            .collect::<Result<_>>()?,
        num_latent_frames: narrow(tokens.num_frames(), "latent frame count")?,
        original_num_samples: audio.samples.len() as u64,
        model_hash: model.model_hash()?,
    };
    Ok(Bitstream { header, tokens })
}

pub fn encode_file(wav_in: &Path, model: &CodecModel, codebooks: Option<usize>) -> Result<Bitstream> {
    encode_audio(&read_wav(wav_in)?, model, codebooks)
}

/// Checks that a stream was produced by a model compatible with `model`.
pub fn check_compatible(header: &BitstreamHeader, model: &CodecModel, allow_hash_mismatch: bool) -> Result<()> {
    let cfg = model.config();
    let expect = [
        ("sample rate", header.sample_rate as usize, cfg.stft.sample_rate as usize),
        ("hop length", header.hop_length as usize, cfg.stft.hop_length),
        ("fft size", header.fft_size as usize, cfg.stft.fft_size),
        ("window length", header.win_length as usize, cfg.stft.win_length),
        ("downsample ratio", header.downsample_ratio as usize, cfg.generator.downsample_ratio()),
    ];
    for (name, got, want) in expect {
        if got != want {
            bail!(Corrupt, "stream {name} {got} does not match the model ({want})");
        }
    }
    let n = header.num_codebooks();
    if n > cfg.quantizer.num_codebooks
        || header.codebook_sizes.iter().zip(&cfg.quantizer.sizes).any(|(&a, &b)| a as usize != b)
    {
        bail!(
            Corrupt,
            "stream codebooks {:?} are not a prefix of the model's {:?}",
            header.codebook_sizes,
            cfg.quantizer.sizes
        );
    }
    let (_, latent) = cfg.frame_counts(usize::try_from(header.original_num_samples).unwrap_or(usize::MAX));
    if latent != header.num_latent_frames as usize {
        bail!(
            Corrupt,
            "{} samples need {latent} latent frames, stream has {}",
            header.original_num_samples,
            header.num_latent_frames
        );
    }
    if !allow_hash_mismatch && header.model_hash != model.model_hash()? {
        bail!(
            Data,
            "stream was encoded by model {} but the loaded model is {}",
            hex(&header.model_hash),
            hex(&model.model_hash()?)
        );
    }
    Ok(())
}

pub fn decode_bitstream(stream: &Bitstream, model: &CodecModel, allow_hash_mismatch: bool) -> Result<Audio> {
    check_compatible(&stream.header, model, allow_hash_mismatch)?;
    let samples = model.decode(&stream.tokens, stream.header.original_num_samples as usize)?;
    Ok(Audio {
        samples,
        sample_rate: stream.header.sample_rate,
    })
}

pub fn decode_file(stfc_in: &Path, model: &CodecModel, allow_hash_mismatch: bool) -> Result<Audio> {
    decode_bitstream(&Bitstream::read(stfc_in)?, model, allow_hash_mismatch)
}
