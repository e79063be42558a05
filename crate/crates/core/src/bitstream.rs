//! SDC1 token container.
//!
//! Header (30 bytes, little-endian):
//!
//! | offset | size | field                         |
//! |-------:|-----:|-------------------------------|
//! | 0      | 4    | magic `"SDC1"`                |
//! | 4      | 2    | version (currently 1)         |
//! | 6      | 4    | sample rate                   |
//! | 10     | 4    | latent width D                |
//! | 14     | 2    | code width d                  |
//! | 16     | 2    | layers per source R           |
//! | 18     | 2    | shared tail layers S          |
//! | 20     | 1    | bits per code K               |
//! | 21     | 1    | source bitmask (bit i = `SourceId::index() == i`) |
//! | 22     | 4    | frames F                      |
//! | 26     | 4    | original sample count         |
//!
//! The payload follows: for each frame, for each layer, for each active
//! source in bitmask order, one K-bit code written MSB first. The final
//! byte is zero-padded.

use crate::config::CodecConfig;
use crate::error::{Error, Result};
use crate::mixture::SourceId;
use crate::rvq::CodeGrid;

pub const MAGIC: &[u8; 4] = b"SDC1";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 30;

/// Everything in the header apart from the magic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamHeader {
    pub version: u16,
    pub sample_rate: u32,
    pub latent_dim: u32,
    pub code_dim: u16,
    pub n_layers: u16,
    pub shared_tail: u16,
    pub codebook_bits: u8,
    pub sources: Vec<SourceId>,
    pub n_frames: u32,
    pub num_samples: u32,
}

impl StreamHeader {
    pub fn for_codes(cfg: &CodecConfig, codes: &CodeGrid, num_samples: usize) -> Result<Self> {
        let narrow = |field: &str, v: usize, max: u64| -> Result<u64> {
            if v as u64 > max {
                Err(Error::config(field, format!("{v} does not fit the bitstream header")))
            } else {
                Ok(v as u64)
            }
        };
        if codes.n_layers != cfg.n_layers {
            return Err(Error::config(
                "n_layers",
                format!("grid has {} layers, config {}", codes.n_layers, cfg.n_layers),
            ));
        }
        let mut sources = codes.sources.clone();
        sources.sort();
        sources.dedup();
        if sources.len() != codes.sources.len() || sources.is_empty() {
            return Err(Error::config("sources", "grid needs distinct, non-empty sources"));
        }
        Ok(Self {
            version: VERSION,
            sample_rate: cfg.sample_rate,
            latent_dim: narrow("latent_dim", cfg.latent_dim, u32::MAX as u64)? as u32,
            code_dim: narrow("code_dim", cfg.code_dim, u16::MAX as u64)? as u16,
            n_layers: narrow("n_layers", cfg.n_layers, u16::MAX as u64)? as u16,
            shared_tail: narrow("shared_tail", cfg.shared_tail, u16::MAX as u64)? as u16,
            codebook_bits: narrow("codebook_bits", cfg.codebook_bits as usize, 32)? as u8,
            sources,
            n_frames: narrow("n_frames", codes.n_frames, u32::MAX as u64)? as u32,
            num_samples: narrow("num_samples", num_samples, u32::MAX as u64)? as u32,
        })
    }

    pub fn payload_bits(&self) -> u64 {
        self.sources.len() as u64 * self.n_layers as u64 * self.codebook_bits as u64 * self.n_frames as u64
    }

    fn bitmask(&self) -> u8 {
        self.sources.iter().fold(0u8, |m, s| m | (1 << s.index()))
    }

    /// Checks that a model built from `cfg` can decode this stream.
    pub fn check_config(&self, cfg: &CodecConfig) -> Result<()> {
        let pairs: [(&str, u64, u64); 6] = [
            ("sample_rate", self.sample_rate as u64, cfg.sample_rate as u64),
            ("latent_dim", self.latent_dim as u64, cfg.latent_dim as u64),
            ("code_dim", self.code_dim as u64, cfg.code_dim as u64),
            ("n_layers", self.n_layers as u64, cfg.n_layers as u64),
            ("shared_tail", self.shared_tail as u64, cfg.shared_tail as u64),
            ("codebook_bits", self.codebook_bits as u64, cfg.codebook_bits as u64),
        ];
        for (field, stream, model) in pairs {
            if stream != model {
                return Err(Error::config(field, format!("bitstream has {stream}, model has {model}")));
            }
        }
        if let Some(s) = self.sources.iter().find(|s| !cfg.sources.contains(s)) {
            return Err(Error::config("sources", format!("bitstream carries `{s}`, which the model lacks")));
        }
        Ok(())
    }
}

struct BitWriter {
    bytes: Vec<u8>,
    acc: u64,
    filled: u32,
}

impl BitWriter {
    fn put(&mut self, value: u32, bits: u32) {
        for i in (0..bits).rev() {
            self.acc = (self.acc << 1) | ((value >> i) & 1) as u64;
            self.filled += 1;
            if self.filled == 8 {
                self.bytes.push(self.acc as u8);
                self.acc = 0;
                self.filled = 0;
            }
        }
    }

    fn finish(mut self) -> Vec<u8> {
        if self.filled > 0 {
            self.bytes.push((self.acc << (8 - self.filled)) as u8);
        }
        self.bytes
    }
}

/// Serializes `codes` with a header describing `cfg`.
pub fn pack_bitstream(codes: &CodeGrid, cfg: &CodecConfig, num_samples: usize) -> Result<Vec<u8>> {
    let header = StreamHeader::for_codes(cfg, codes, num_samples)?;
    codes.check_range(cfg.codebook_bits)?;
    let k = header.codebook_bits as u32;
    let mut w = BitWriter {
        bytes: Vec::with_capacity(HEADER_LEN + header.payload_bits().div_ceil(8) as usize),
        acc: 0,
        filled: 0,
    };
    w.bytes.extend_from_slice(MAGIC);
    w.bytes.extend_from_slice(&header.version.to_le_bytes());
    w.bytes.extend_from_slice(&header.sample_rate.to_le_bytes());
    w.bytes.extend_from_slice(&header.latent_dim.to_le_bytes());
    w.bytes.extend_from_slice(&header.code_dim.to_le_bytes());
    w.bytes.extend_from_slice(&header.n_layers.to_le_bytes());
    w.bytes.extend_from_slice(&header.shared_tail.to_le_bytes());
    w.bytes.push(header.codebook_bits);
    w.bytes.push(header.bitmask());
    w.bytes.extend_from_slice(&header.n_frames.to_le_bytes());
    w.bytes.extend_from_slice(&header.num_samples.to_le_bytes());
    for f in 0..codes.n_frames {
        for l in 0..codes.n_layers {
            for &s in &header.sources {
                let c = codes.get(s, l, f).expect("grid covers its own sources");
                w.put(c, k);
            }
        }
    }
    Ok(w.finish())
}

fn read<const N: usize>(bytes: &[u8], at: usize) -> Result<[u8; N]> {
    bytes
        .get(at..at + N)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| Error::format(bytes.len(), format!("header truncated: need {} bytes", HEADER_LEN)))
}

pub fn parse_header(bytes: &[u8]) -> Result<StreamHeader> {
    if read::<4>(bytes, 0)? != *MAGIC {
        return Err(Error::format(0, "bad magic, expected SDC1"));
    }
    let version = u16::from_le_bytes(read(bytes, 4)?);
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let codebook_bits = read::<1>(bytes, 20)?[0];
    if !(1..=32).contains(&codebook_bits) {
        return Err(Error::format(20, format!("invalid code width {codebook_bits}")));
    }
    let mask = read::<1>(bytes, 21)?[0];
    if mask == 0 || mask >> SourceId::ALL.len() != 0 {
        return Err(Error::format(21, format!("invalid source bitmask {mask:#04x}")));
    }
    let n_layers = u16::from_le_bytes(read(bytes, 16)?);
    if n_layers == 0 {
        return Err(Error::format(16, "zero layers"));
    }
    let shared_tail = u16::from_le_bytes(read(bytes, 18)?);
    if shared_tail > n_layers {
        return Err(Error::format(18, format!("shared tail {shared_tail} exceeds {n_layers} layers")));
    }
    Ok(StreamHeader {
        version,
        sample_rate: u32::from_le_bytes(read(bytes, 6)?),
        latent_dim: u32::from_le_bytes(read(bytes, 10)?),
        code_dim: u16::from_le_bytes(read(bytes, 14)?),
        n_layers,
        shared_tail,
        codebook_bits,
        sources: SourceId::ALL.into_iter().filter(|s| mask & (1 << s.index()) != 0).collect(),
        n_frames: u32::from_le_bytes(read(bytes, 22)?),
        num_samples: u32::from_le_bytes(read(bytes, 26)?),
    })
}

/// Inverse of [`pack_bitstream`]; sources come back in bitmask order.
pub fn unpack_bitstream(bytes: &[u8]) -> Result<(CodeGrid, StreamHeader)> {
    let header = parse_header(bytes)?;
    let need_bits = header.payload_bits();
    let have_bits = (bytes.len() - HEADER_LEN) as u64 * 8;
    let need_bytes = need_bits.div_ceil(8);
    if have_bits < need_bits {
        return Err(Error::format(
            bytes.len(),
            format!("payload truncated: expected {need_bits} bits, got {have_bits}"),
        ));
    }
    if have_bits > need_bytes * 8 {
        return Err(Error::format(
            HEADER_LEN + need_bytes as usize,
            format!("trailing data: expected {need_bits} bits, got {have_bits}"),
        ));
    }
    let payload = &bytes[HEADER_LEN..];
    let (n_src, n_layers, n_frames) = (header.sources.len(), header.n_layers as usize, header.n_frames as usize);
    let k = header.codebook_bits as u64;
    let mut codes = vec![0u32; n_src * n_layers * n_frames];
    let mut bit = 0u64;
    for f in 0..n_frames {
        for l in 0..n_layers {
            for si in 0..n_src {
                let mut v = 0u32;
                for _ in 0..k {
                    let byte = payload[(bit / 8) as usize];
                    v = (v << 1) | ((byte >> (7 - bit % 8)) & 1) as u32;
                    bit += 1;
                }
                codes[(si * n_layers + l) * n_frames + f] = v;
            }
        }
    }
    let grid = CodeGrid::new(header.sources.clone(), n_layers, n_frames, codes)?;
    Ok((grid, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(cfg: &CodecConfig, sources: Vec<SourceId>, frames: usize, rng: &mut impl Rng) -> CodeGrid {
        let n = sources.len() * cfg.n_layers * frames;
        let codes = (0..n).map(|_| rng.random_range(0..cfg.codebook_size() as u32)).collect();
        CodeGrid::new(sources, cfg.n_layers, frames, codes).unwrap()
    }

    #[test]
    fn paper_rate_one_second() {
        let cfg = CodecConfig::paper();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (sources, bits) in [(vec![SourceId::Speech], 6000u64), (SourceId::ALL.to_vec(), 18000)] {
            let grid = random_grid(&cfg, sources, 50, &mut rng);
            let bytes = pack_bitstream(&grid, &cfg, 16000).unwrap();
            let (_, h) = unpack_bitstream(&bytes).unwrap();
            assert_eq!(h.payload_bits(), bits);
            assert_eq!(bytes.len() - HEADER_LEN, (bits as usize).div_ceil(8));
        }
    }

    #[test]
    fn ten_seconds_three_sources() {
        let cfg = CodecConfig::paper();
        let grid = random_grid(&cfg, SourceId::ALL.to_vec(), 500, &mut ChaCha8Rng::seed_from_u64(1));
        let bytes = pack_bitstream(&grid, &cfg, 160_000).unwrap();
        assert_eq!((bytes.len() - HEADER_LEN) * 8, 180_000);
    }

    #[test]
    fn msb_first_layout() {
        let mut cfg = CodecConfig::toy();
        cfg.n_layers = 2;
        cfg.shared_tail = 0;
        cfg.codebook_bits = 3;
        // speech: layer0 [1, 2], layer1 [3, 4]; sfx: layer0 [5, 6], layer1 [7, 0]
        let grid = CodeGrid::new(vec![SourceId::Speech, SourceId::Sfx], 2, 2, vec![1, 2, 3, 4, 5, 6, 7, 0]).unwrap();
        let bytes = pack_bitstream(&grid, &cfg, 128).unwrap();
        // frame0: 1 5 3 7, frame1: 2 6 4 0 → 001 101 011 111 010 110 100 000
        assert_eq!(&bytes[HEADER_LEN..], &[0b0011_0101, 0b1111_0101, 0b1010_0000]);
        assert_eq!(bytes[21], 0b101);
    }

    #[test]
    fn corrupted_headers_are_rejected() {
        let cfg = CodecConfig::toy();
        let grid = random_grid(&cfg, vec![SourceId::Music], 10, &mut ChaCha8Rng::seed_from_u64(2));
        let good = pack_bitstream(&grid, &cfg, 640).unwrap();
        let corrupt = |at: usize, v: u8| {
            let mut b = good.clone();
            b[at] = v;
            unpack_bitstream(&b)
        };
        assert!(matches!(corrupt(0, b'X'), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(corrupt(4, 9), Err(Error::Format { offset: 4, .. })));
        assert!(matches!(corrupt(20, 0), Err(Error::Format { offset: 20, .. })));
        assert!(matches!(corrupt(21, 0), Err(Error::Format { offset: 21, .. })));
        assert!(matches!(corrupt(21, 0x10), Err(Error::Format { offset: 21, .. })));
        assert!(matches!(unpack_bitstream(&good[..12]), Err(Error::Format { offset: 12, .. })));
    }

    #[test]
    fn truncated_payload_names_bit_counts() {
        let cfg = CodecConfig::toy();
        let grid = random_grid(&cfg, vec![SourceId::Music], 10, &mut ChaCha8Rng::seed_from_u64(3));
        let good = pack_bitstream(&grid, &cfg, 640).unwrap();
        let err = unpack_bitstream(&good[..good.len() - 2]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected 240 bits"), "{msg}");
        assert!(msg.contains("got 224"), "{msg}");
        let mut long = good.clone();
        long.push(0);
        assert!(unpack_bitstream(&long).is_err());
    }

    #[test]
    fn out_of_range_code_is_rejected() {
        let cfg = CodecConfig::toy();
        let mut grid = random_grid(&cfg, vec![SourceId::Sfx], 4, &mut ChaCha8Rng::seed_from_u64(4));
        grid.codes[3] = cfg.codebook_size() as u32;
        assert!(matches!(pack_bitstream(&grid, &cfg, 256), Err(Error::Format { .. })));
    }

    #[test]
    fn header_checks_model_config() {
        let cfg = CodecConfig::toy();
        let grid = random_grid(&cfg, vec![SourceId::Sfx], 4, &mut ChaCha8Rng::seed_from_u64(5));
        let (_, h) = unpack_bitstream(&pack_bitstream(&grid, &cfg, 256).unwrap()).unwrap();
        assert!(h.check_config(&cfg).is_ok());
        let mut other = cfg.clone();
        other.code_dim += 1;
        assert!(matches!(h.check_config(&other), Err(Error::Config { field, .. }) if field == "code_dim"));
    }

    proptest! {
        #[test]
        fn round_trip_is_identity(
            seed in any::<u64>(),
            mask in 1u8..8,
            k in 1u32..=16,
            layers in 1usize..6,
            frames in 0usize..40,
        ) {
            let mut cfg = CodecConfig::toy();
            cfg.codebook_bits = k;
            cfg.n_layers = layers;
            cfg.shared_tail = 0;
            let sources: Vec<SourceId> = SourceId::ALL.into_iter().filter(|s| mask & (1 << s.index()) != 0).collect();
            let grid = random_grid(&cfg, sources, frames, &mut ChaCha8Rng::seed_from_u64(seed));
            let bytes = pack_bitstream(&grid, &cfg, frames * 64).unwrap();
            let (back, h) = unpack_bitstream(&bytes).unwrap();
            prop_assert_eq!(&back, &grid);
            prop_assert_eq!(h.payload_bits(), (grid.sources.len() * layers * k as usize * frames) as u64);
            prop_assert_eq!(pack_bitstream(&back, &cfg, frames * 64).unwrap(), bytes);
        }
    }
}
