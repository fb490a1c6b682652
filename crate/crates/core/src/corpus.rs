//! Synthetic utterance generation with controllable covariate shift.
//!
//! Each character class has a fixed random prototype feature vector; an
//! utterance emits its characters as repeated prototype frames plus jitter.
//! Covariate shift is additive Gaussian noise on the features. Prototypes
//! are derived from `template_seed` alone, so corpora generated with the
//! same template seed share one acoustic "alphabet".

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::eval::Transcript;
use crate::matrix::Matrix;

const CORPUS_MAGIC: &[u8; 8] = b"SUTACRP1";

/// One test or training sample: a synthetic feature sequence plus its
/// reference transcript.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub features: Matrix,
    pub transcript: Transcript,
    pub domain_tag: String,
}

impl Utterance {
    pub fn duration_frames(&self) -> usize {
        self.features.rows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub utterances: usize,
    pub feature_dim: usize,
    /// Words per utterance, inclusive range.
    pub words_min: usize,
    pub words_max: usize,
    /// Characters per word, inclusive range.
    pub word_chars_min: usize,
    pub word_chars_max: usize,
    pub frames_per_char: usize,
    /// Stddev of per-frame jitter around the character prototype.
    pub template_jitter: f64,
    /// Disallow doubled letters ("TT") inside words. Equal adjacent
    /// characters produce identical frame runs that greedy CTC cannot
    /// reliably split, so they are inherently ambiguous; evaluation corpora
    /// avoid them while training corpora keep them (the ambiguity keeps
    /// supervised training from saturating to zero loss).
    pub avoid_repeats: bool,
    /// Additive Gaussian noise amplitude applied at generation time.
    pub noise_delta: f64,
    /// Seeds the character prototypes; share it across corpora that must
    /// agree on the acoustic alphabet.
    pub template_seed: u64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            utterances: 50,
            feature_dim: 16,
            words_min: 1,
            words_max: 5,
            word_chars_min: 2,
            word_chars_max: 4,
            frames_per_char: 4,
            template_jitter: 0.1,
            avoid_repeats: false,
            noise_delta: 0.0,
            template_seed: 1234,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    fn validate(&self) -> Result<()> {
        contract!(self.utterances >= 1, "corpus: utterance count must be >= 1");
        contract!(self.feature_dim >= 1, "corpus: feature_dim must be >= 1");
        contract!(
            self.words_min >= 1 && self.words_min <= self.words_max,
            "corpus: invalid words range"
        );
        contract!(
            self.word_chars_min >= 1 && self.word_chars_min <= self.word_chars_max,
            "corpus: invalid word length range"
        );
        contract!(self.frames_per_char >= 1, "corpus: frames_per_char must be >= 1");
        contract!(self.template_jitter >= 0.0, "corpus: jitter must be >= 0");
        contract!(self.noise_delta >= 0.0, "corpus: noise delta must be >= 0");
        Ok(())
    }
}

/// Fixed prototype vector for one character class.
fn prototype(class: usize, dim: usize, template_seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(
        template_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(class as u64),
    );
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Deterministic synthetic corpus: seeded word sampling, prototype frames
/// with jitter, optional generation-time Gaussian shift.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<Utterance>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let tag = if spec.noise_delta > 0.0 {
        format!("noise-{}", spec.noise_delta)
    } else {
        "clean".to_string()
    };

    let mut corpus = Vec::with_capacity(spec.utterances);
    for u in 0..spec.utterances {
        let n_words = rng.gen_range(spec.words_min..=spec.words_max);
        let mut text = String::new();
        for w in 0..n_words {
            if w > 0 {
                text.push(' ');
            }
            let n_chars = rng.gen_range(spec.word_chars_min..=spec.word_chars_max);
            let mut prev = 0u8;
            for _ in 0..n_chars {
                let mut ch = b'A' + rng.gen_range(0..26u8);
                while spec.avoid_repeats && ch == prev {
                    ch = b'A' + rng.gen_range(0..26u8);
                }
                text.push(ch as char);
                prev = ch;
            }
        }
        let transcript = Transcript::from_text(&text);
        let classes = transcript.to_classes();

        let t_in = classes.len() * spec.frames_per_char;
        let mut features = Matrix::zeros(t_in, spec.feature_dim);
        let mut row = 0;
        for &class in &classes {
            let proto = prototype(class, spec.feature_dim, spec.template_seed);
            for _ in 0..spec.frames_per_char {
                for (j, &p) in proto.iter().enumerate() {
                    let jitter: f64 = rng.sample(StandardNormal);
                    features.set(row, j, p + spec.template_jitter * jitter);
                }
                row += 1;
            }
        }

        let mut utt = Utterance {
            id: format!("utt-{u:04}"),
            features,
            transcript,
            domain_tag: tag.clone(),
        };
        if spec.noise_delta > 0.0 {
            let noise_seed = rng.gen::<u64>();
            utt = add_gaussian_noise(&utt, spec.noise_delta, noise_seed)?;
        }
        corpus.push(utt);
    }
    Ok(corpus)
}

/// Additive Gaussian noise with the structure of an acoustic noise floor:
/// one Gaussian channel bias drawn per utterance (the systematic component a
/// fixed noise source leaves on every frame's features) plus i.i.d. per-entry
/// fluctuation. Each part carries half the variance, so the marginal
/// per-entry standard deviation equals `delta`. Transcript and frame count
/// are untouched; the domain tag records the amplitude.
pub fn add_gaussian_noise(utterance: &Utterance, delta: f64, seed: u64) -> Result<Utterance> {
    contract!(delta >= 0.0, "noise delta must be >= 0, got {delta}");
    if delta == 0.0 {
        return Ok(utterance.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = delta / std::f64::consts::SQRT_2;
    let dim = utterance.features.cols();
    let bias: Vec<f64> = (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    let mut col = 0;
    let features = utterance.features.map(|x| {
        let eps: f64 = rng.sample(StandardNormal);
        let v = x + bias[col] + scale * eps;
        col = (col + 1) % dim;
        v
    });
    Ok(Utterance {
        id: utterance.id.clone(),
        features,
        transcript: utterance.transcript.clone(),
        domain_tag: format!("noise-{delta}"),
    })
}

/// Versioned little-endian container; `load_corpus` refuses truncated or
/// mismatched files rather than returning a partial corpus.
pub fn save_corpus(path: &Path, corpus: &[Utterance]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CORPUS_MAGIC)?;
    w.write_u32::<LittleEndian>(corpus.len() as u32)?;
    for utt in corpus {
        write_str(&mut w, &utt.id)?;
        write_str(&mut w, &utt.domain_tag)?;
        write_str(&mut w, &utt.transcript.text())?;
        w.write_u32::<LittleEndian>(utt.features.rows() as u32)?;
        w.write_u32::<LittleEndian>(utt.features.cols() as u32)?;
        for &v in utt.features.data() {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<Vec<Utterance>> {
    let mut r = BufReader::new(File::open(path)?);
    let fmt = |what: String| Error::Format(format!("corpus {}: {what}", path.display()));

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| fmt("truncated header".into()))?;
    if &magic != CORPUS_MAGIC {
        return Err(fmt("bad magic".into()));
    }
    let count = r.read_u32::<LittleEndian>().map_err(|_| fmt("truncated count".into()))?;
    let mut corpus = Vec::with_capacity(count as usize);
    for i in 0..count {
        let ctx = |what: &str, id: &str| fmt(format!("{what} in record {i} ({id})"));
        let id = read_str(&mut r).map_err(|_| ctx("truncated id", "?"))?;
        let domain_tag = read_str(&mut r).map_err(|_| ctx("truncated tag", &id))?;
        let text = read_str(&mut r).map_err(|_| ctx("truncated transcript", &id))?;
        let rows = r.read_u32::<LittleEndian>().map_err(|_| ctx("truncated shape", &id))? as usize;
        let cols = r.read_u32::<LittleEndian>().map_err(|_| ctx("truncated shape", &id))? as usize;
        let mut data = vec![0.0; rows * cols];
        for v in data.iter_mut() {
            *v = r
                .read_f64::<LittleEndian>()
                .map_err(|_| ctx("truncated features", &id))?;
        }
        corpus.push(Utterance {
            id,
            features: Matrix::from_vec(rows, cols, data),
            transcript: Transcript::from_text(&text),
            domain_tag,
        });
    }
    Ok(corpus)
}

/// Human-readable sidecar: one `id<TAB>transcript` line per utterance.
pub fn save_transcript_sidecar(path: &Path, corpus: &[Utterance]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for utt in corpus {
        writeln!(w, "{}\t{}", utt.id, utt.transcript.text())?;
    }
    w.flush()?;
    Ok(())
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str(r: &mut impl Read) -> std::io::Result<String> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut bytes = vec![0u8; len];
    r.read_exact(&mut bytes)?;
    String::from_utf8(bytes)
        .map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidData, "not utf-8"))
}
