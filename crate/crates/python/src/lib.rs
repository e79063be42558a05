//! Python bindings: the `sdcodec` module.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use candle_core::{DType, Device};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sdcodec::bitstream::unpack_bitstream;
use sdcodec::config::{Preset, RunConfig};
use sdcodec::dsp::wav::{read_wav as read_wav_file, write_wav as write_wav_file, WavFormat};
use sdcodec::eval::separate_with_mask;
use sdcodec::{Error, SdCodec, SourceId, Waveform};

create_exception!(sdcodec, SdcodecError, PyException, "Base class of every sdcodec error.");
create_exception!(sdcodec, ConfigError, SdcodecError, "Invalid configuration or argument.");
create_exception!(sdcodec, FormatError, SdcodecError, "Malformed bitstream, checkpoint or file.");
create_exception!(sdcodec, NumericError, SdcodecError, "Non-finite values.");

fn to_py(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Config { .. } => ConfigError::new_err(msg),
        Error::Format { .. } => FormatError::new_err(msg),
        Error::Io { .. } => pyo3::exceptions::PyIOError::new_err(msg),
        Error::Numeric(_) => NumericError::new_err(msg),
        _ => SdcodecError::new_err(msg),
    }
}

fn parse_sources(names: Option<Vec<String>>) -> PyResult<Option<BTreeSet<SourceId>>> {
    names
        .map(|v| v.iter().map(|s| s.parse::<SourceId>()).collect::<sdcodec::Result<_>>())
        .transpose()
        .map_err(to_py)
}

fn waveform(samples: Vec<f32>, sample_rate: u32) -> PyResult<Waveform> {
    Waveform::new(samples, sample_rate).map_err(to_py)
}

/// A run configuration: a preset with optional overrides.
#[pyclass(module = "sdcodec", frozen)]
struct Config {
    inner: RunConfig,
}

#[pymethods]
impl Config {
    /// `"toy"` or `"paper"`.
    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        let preset = match name {
            "toy" => Preset::Toy,
            "paper" => Preset::Paper,
            other => return Err(ConfigError::new_err(format!("unknown preset `{other}`"))),
        };
        Ok(Self {
            inner: RunConfig::preset(preset),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: RunConfig::load(path).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: RunConfig::from_toml_str(text).map_err(to_py)?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml_string()
    }

    #[getter]
    fn sample_rate(&self) -> u32 {
        self.inner.codec.sample_rate
    }

    #[getter]
    fn hop_length(&self) -> usize {
        self.inner.codec.hop_length()
    }

    #[getter]
    fn frame_rate(&self) -> f64 {
        self.inner.codec.frame_rate()
    }

    #[getter]
    fn n_layers(&self) -> usize {
        self.inner.codec.n_layers
    }

    #[getter]
    fn shared_tail(&self) -> usize {
        self.inner.codec.shared_tail
    }

    #[getter]
    fn codebook_bits(&self) -> u32 {
        self.inner.codec.codebook_bits
    }

    #[getter]
    fn sources(&self) -> Vec<String> {
        self.inner.codec.sources.iter().map(|s| s.to_string()).collect()
    }

    #[getter]
    fn total_steps(&self) -> u64 {
        self.inner.train.total_steps
    }

    /// Payload bitrate when `num_sources` sources are coded.
    fn bits_per_second(&self, num_sources: usize) -> f64 {
        let c = &self.inner.codec;
        c.frame_rate() * (c.bits_per_frame_per_source() * num_sources) as f64
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(preset={:?}, n_layers={}, shared_tail={}, codebook_bits={})",
            self.inner.preset, self.inner.codec.n_layers, self.inner.codec.shared_tail, self.inner.codec.codebook_bits
        )
    }
}

/// A codec model, untrained or loaded from a checkpoint.
#[pyclass(module = "sdcodec", frozen)]
struct Codec {
    inner: SdCodec,
}

#[pymethods]
impl Codec {
    /// A freshly initialized model for `config` (toy preset by default).
    #[new]
    #[pyo3(signature = (config=None, seed=0))]
    fn new(config: Option<&Config>, seed: u64) -> PyResult<Self> {
        let cfg = config.map_or_else(|| RunConfig::preset(Preset::Toy), |c| c.inner.clone());
        Ok(Self {
            inner: SdCodec::new(&cfg.codec, seed, DType::F32, &Device::Cpu).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(checkpoint: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: sdcodec_cli::load_model(&checkpoint).map_err(to_py)?,
        })
    }

    #[getter]
    fn sample_rate(&self) -> u32 {
        self.inner.config().sample_rate
    }

    #[getter]
    fn sources(&self) -> Vec<String> {
        self.inner.config().sources.iter().map(|s| s.to_string()).collect()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.params().num_params()
    }

    /// Encodes mono samples into an SDC1 bitstream.
    #[pyo3(signature = (samples, sources=None))]
    fn encode<'py>(&self, py: Python<'py>, samples: Vec<f32>, sources: Option<Vec<String>>) -> PyResult<Bound<'py, PyBytes>> {
        let x = waveform(samples, self.sample_rate())?;
        let sources = parse_sources(sources)?
            .unwrap_or_else(|| self.inner.config().sources.iter().copied().collect());
        let bytes = py.detach(|| self.inner.encode_to_bitstream(&x, &sources)).map_err(to_py)?;
        Ok(PyBytes::new(py, &bytes))
    }

    /// Decodes the sum of the chosen sources (default: all in the stream).
    #[pyo3(signature = (stream, sources=None))]
    fn decode(&self, py: Python<'_>, stream: &[u8], sources: Option<Vec<String>>) -> PyResult<Vec<f32>> {
        let sources = parse_sources(sources)?;
        let y = py
            .detach(|| self.inner.decode_bitstream(stream, sources.as_ref()))
            .map_err(to_py)?;
        Ok(y.into_samples())
    }

    /// Encodes, quantizes through the given source paths and decodes their sum.
    #[pyo3(signature = (samples, route=None))]
    fn resynthesize(&self, py: Python<'_>, samples: Vec<f32>, route: Option<Vec<String>>) -> PyResult<Vec<f32>> {
        let x = waveform(samples, self.sample_rate())?;
        let route = parse_sources(route)?.unwrap_or_else(|| self.inner.config().sources.iter().copied().collect());
        let y = py.detach(|| self.inner.resynthesize(&x, &route)).map_err(to_py)?;
        Ok(y.into_samples())
    }

    /// Splits a mixture into one signal per source; the outputs sum to the input.
    fn separate(&self, py: Python<'_>, samples: Vec<f32>) -> PyResult<BTreeMap<String, Vec<f32>>> {
        let x = waveform(samples, self.sample_rate())?;
        let sources: BTreeSet<SourceId> = self.inner.config().sources.iter().copied().collect();
        let out = py
            .detach(|| {
                let (_, decoded) = self.inner.resynthesize_each(&x, &sources)?;
                separate_with_mask(&x, &decoded)
            })
            .map_err(to_py)?;
        Ok(out.into_iter().map(|(s, w)| (s.to_string(), w.into_samples())).collect())
    }
}

/// Scale-invariant SDR in dB.
#[pyfunction]
fn si_sdr(estimate: Vec<f32>, reference: Vec<f32>) -> PyResult<f64> {
    sdcodec::eval::si_sdr(&waveform(estimate, 16_000)?, &waveform(reference, 16_000)?).map_err(to_py)
}

/// Integrated loudness in LUFS.
#[pyfunction]
#[pyo3(signature = (samples, sample_rate=16_000))]
fn measure_lufs(samples: Vec<f32>, sample_rate: u32) -> PyResult<f64> {
    sdcodec::dsp::measure_lufs(&waveform(samples, sample_rate)?).map_err(to_py)
}

/// One synthetic toy stem for `source`.
#[pyfunction]
#[pyo3(signature = (source, duration=1.0, seed=0))]
fn synth_source(source: &str, duration: f64, seed: u64) -> PyResult<Vec<f32>> {
    let s: SourceId = source.parse().map_err(to_py)?;
    let w = sdcodec::synth::synth_toy_source(s, duration, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(to_py)?;
    Ok(w.into_samples())
}

/// Returns `(samples, sample_rate)` of a mono WAV file.
#[pyfunction]
fn read_wav(path: PathBuf) -> PyResult<(Vec<f32>, u32)> {
    let w = read_wav_file(path).map_err(to_py)?;
    let sr = w.sample_rate();
    Ok((w.into_samples(), sr))
}

/// Writes a mono 32-bit float WAV file.
#[pyfunction]
#[pyo3(signature = (path, samples, sample_rate=16_000))]
fn write_wav(path: PathBuf, samples: Vec<f32>, sample_rate: u32) -> PyResult<()> {
    write_wav_file(path, &waveform(samples, sample_rate)?, WavFormat::Float32).map_err(to_py)
}

/// Parses an SDC1 bitstream into its header fields and `codes[source][layer][frame]`.
#[pyfunction]
fn unpack<'py>(py: Python<'py>, stream: &[u8]) -> PyResult<Bound<'py, PyDict>> {
    let (grid, h) = unpack_bitstream(stream).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("sample_rate", h.sample_rate)?;
    d.set_item("latent_dim", h.latent_dim)?;
    d.set_item("code_dim", h.code_dim)?;
    d.set_item("n_layers", h.n_layers)?;
    d.set_item("shared_tail", h.shared_tail)?;
    d.set_item("codebook_bits", h.codebook_bits)?;
    d.set_item("n_frames", h.n_frames)?;
    d.set_item("num_samples", h.num_samples)?;
    d.set_item("payload_bits", h.payload_bits())?;
    d.set_item("sources", h.sources.iter().map(|s| s.to_string()).collect::<Vec<_>>())?;
    let codes: Vec<Vec<Vec<u32>>> = grid
        .sources
        .iter()
        .map(|&s| (0..grid.n_layers).map(|l| grid.layer_codes(s, l).unwrap_or_default().to_vec()).collect())
        .collect();
    d.set_item("codes", codes)?;
    Ok(d)
}

/// Writes a synthetic stem corpus; returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out_dir, n_items=10, seed=0, duration=4.0))]
fn synth_data(py: Python<'_>, out_dir: PathBuf, n_items: usize, seed: u64, duration: f64) -> PyResult<PathBuf> {
    py.detach(|| sdcodec_cli::synth_data(&out_dir, n_items, seed, duration)).map_err(to_py)
}

/// Trains from a config file; returns the run directory.
#[pyfunction]
#[pyo3(signature = (config, run_dir=None, resume=false))]
fn train(py: Python<'_>, config: PathBuf, run_dir: Option<PathBuf>, resume: bool) -> PyResult<PathBuf> {
    py.detach(|| sdcodec_cli::train(&config, run_dir.as_deref(), resume)).map_err(to_py)
}

/// Scores a model (or the identity oracle when `codec` is None); returns the summary table.
#[pyfunction]
#[pyo3(signature = (manifest, report, codec=None, segment_s=4.0, seed=0))]
fn evaluate(
    py: Python<'_>,
    manifest: PathBuf,
    report: PathBuf,
    codec: Option<&Codec>,
    segment_s: f64,
    seed: u64,
) -> PyResult<String> {
    let model = codec.map(|c| &c.inner);
    py.detach(|| {
        sdcodec_cli::eval(&sdcodec_cli::EvalArgs {
            model,
            manifest: &manifest,
            report: &report,
            segment_s,
            seed,
        })
    })
    .map(|r| r.table())
    .map_err(to_py)
}

#[pymodule(name = "sdcodec")]
fn sdcodec_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("SOURCES", SourceId::ALL.iter().map(|s| s.to_string()).collect::<Vec<_>>())?;
    m.add("SdcodecError", py.get_type::<SdcodecError>())?;
    m.add("ConfigError", py.get_type::<ConfigError>())?;
    m.add("FormatError", py.get_type::<FormatError>())?;
    m.add("NumericError", py.get_type::<NumericError>())?;
    m.add_class::<Config>()?;
    m.add_class::<Codec>()?;
    m.add_function(wrap_pyfunction!(si_sdr, m)?)?;
    m.add_function(wrap_pyfunction!(measure_lufs, m)?)?;
    m.add_function(wrap_pyfunction!(synth_source, m)?)?;
    m.add_function(wrap_pyfunction!(read_wav, m)?)?;
    m.add_function(wrap_pyfunction!(write_wav, m)?)?;
    m.add_function(wrap_pyfunction!(unpack, m)?)?;
    m.add_function(wrap_pyfunction!(synth_data, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
