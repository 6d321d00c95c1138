//! Feed-forward ReLU classifiers.
//!
//! Parameters are stored as `[W0, b0, W1, b1, ...]` with `W_l` of shape
//! `[fan_in, fan_out]` and `b_l` of shape `[fan_out]`, so a layer computes
//! `x · W + b`. Hidden layers apply ReLU; the last layer emits logits.
//!
//! # Checkpoint format
//!
//! Plain text, one record per line, fields separated by single spaces:
//!
//! ```text
//! rdml-checkpoint 1
//! layer_sizes 10 32 5
//! seed 42
//! weight 0 10 32
//! <10 lines of 32 values>
//! bias 0 32
//! <1 line of 32 values>
//! ...
//! ```
//!
//! Values are written in the shortest form that parses back to the same
//! `f64`, so save/load is bit-exact.

use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::divergence::CategoricalBatch;
use crate::error::{config_err, Error, Result};
use crate::tensor::Tensor;

const CHECKPOINT_MAGIC: &str = "rdml-checkpoint 1";

#[derive(Debug, Clone, PartialEq)]
pub struct StudentModel {
    layer_sizes: Vec<usize>,
    seed: u64,
    params: Vec<Tensor>,
}

/// Output of [`StudentModel::forward`]: the logits node plus the parameter
/// leaves in storage order.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Var,
    pub params: Vec<Var>,
}

fn validate_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 {
        return Err(config_err("layer_sizes", "need at least an input and an output size"));
    }
    if layer_sizes.contains(&0) {
        return Err(config_err("layer_sizes", format!("{layer_sizes:?} contains a zero")));
    }
    Ok(())
}

impl StudentModel {
    /// Glorot-uniform weights from a seeded generator, zero biases.
    pub fn init(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(2 * (layer_sizes.len() - 1));
        for pair in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
            params.push(Tensor::new(vec![fan_in, fan_out], w)?);
            params.push(Tensor::zeros(&[fan_out]));
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            seed,
            params,
        })
    }

    /// Builds a model from explicit parameters in storage order.
    pub fn from_params(layer_sizes: &[usize], seed: u64, params: Vec<Tensor>) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let expected: Vec<Vec<usize>> = layer_sizes
            .windows(2)
            .flat_map(|p| [vec![p[0], p[1]], vec![p[1]]])
            .collect();
        if params.len() != expected.len() || params.iter().zip(&expected).any(|(t, s)| t.shape() != &s[..]) {
            return Err(config_err("params", "parameter shapes do not match layer sizes"));
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            seed,
            params,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn classes(&self) -> usize {
        *self.layer_sizes.last().expect("validated")
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Records the forward pass on `tape`. With `track_grad = false` the
    /// parameters enter as constants, which detaches the output.
    pub fn forward(&self, tape: &mut Tape, x: Var, track_grad: bool) -> Result<Forward> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: shape.to_vec(),
                rhs: vec![0, self.input_dim()],
            });
        }
        let params: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.clone(), track_grad)).collect();
        let layers = params.len() / 2;
        let mut h = x;
        for (l, wb) in params.chunks(2).enumerate() {
            let z = tape.matmul(h, wb[0])?;
            h = tape.add_row(z, wb[1])?;
            if l + 1 < layers {
                h = tape.relu(h)?;
            }
        }
        Ok(Forward { logits: h, params })
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, xv, false)?;
        Ok(tape.value(out.logits).clone())
    }

    pub fn predict_proba(&self, x: &Tensor) -> Result<CategoricalBatch> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, xv, false)?;
        let lp = tape.log_softmax(out.logits)?;
        CategoricalBatch::new(tape.value(lp).map(f64::exp))
    }

    pub fn save<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "{CHECKPOINT_MAGIC}")?;
        writeln!(out, "layer_sizes {}", join(self.layer_sizes.iter()))?;
        writeln!(out, "seed {}", self.seed)?;
        for (l, wb) in self.params.chunks(2).enumerate() {
            let (fan_in, fan_out) = wb[0].dims2().expect("weights are matrices");
            writeln!(out, "weight {l} {fan_in} {fan_out}")?;
            for row in wb[0].rows() {
                writeln!(out, "{}", join(row.iter()))?;
            }
            writeln!(out, "bias {l} {fan_out}")?;
            writeln!(out, "{}", join(wb[1].data().iter()))?;
        }
        Ok(())
    }

    pub fn load<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| -> Result<(usize, String)> {
            match lines.next() {
                Some((n, Ok(line))) => Ok((n, line)),
                Some((_, Err(e))) => Err(e.into()),
                None => Err(Error::Parse {
                    line: 0,
                    message: format!("unexpected end of checkpoint, expected {what}"),
                }),
            }
        };

        let (n, magic) = next("header")?;
        if magic.trim() != CHECKPOINT_MAGIC {
            return Err(parse_err(n, format!("expected `{CHECKPOINT_MAGIC}`, got `{magic}`")));
        }
        let (n, line) = next("layer_sizes")?;
        let layer_sizes: Vec<usize> = tagged(n, &line, "layer_sizes")?;
        validate_sizes(&layer_sizes).map_err(|e| parse_err(n, e.to_string()))?;
        let (n, line) = next("seed")?;
        let seed: Vec<u64> = tagged(n, &line, "seed")?;
        let [seed] = seed[..] else {
            return Err(parse_err(n, "seed takes one value"));
        };

        let mut params = Vec::new();
        for (l, pair) in layer_sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let (n, line) = next("weight header")?;
            let header: Vec<usize> = tagged(n, &line, "weight")?;
            if header != [l, fan_in, fan_out] {
                return Err(parse_err(n, format!("expected `weight {l} {fan_in} {fan_out}`")));
            }
            let mut w = Vec::with_capacity(fan_in * fan_out);
            for _ in 0..fan_in {
                let (n, line) = next("weight row")?;
                w.extend(values(n, &line, fan_out)?);
            }
            params.push(Tensor::new(vec![fan_in, fan_out], w)?);
            let (n, line) = next("bias header")?;
            let header: Vec<usize> = tagged(n, &line, "bias")?;
            if header != [l, fan_out] {
                return Err(parse_err(n, format!("expected `bias {l} {fan_out}`")));
            }
            let (n, line) = next("bias row")?;
            params.push(Tensor::vector(values(n, &line, fan_out)?));
        }
        Self::from_params(&layer_sizes, seed, params)
    }

    pub fn save_to_path(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.save(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load_from_path(path: &Path) -> Result<Self> {
        Self::load(BufReader::new(fs::File::open(path)?))
    }
}

fn join<T: std::fmt::Display>(items: impl Iterator<Item = T>) -> String {
    items.map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn tagged<T: std::str::FromStr>(line_no: usize, line: &str, tag: &str) -> Result<Vec<T>> {
    let mut fields = line.split_whitespace();
    if fields.next() != Some(tag) {
        return Err(parse_err(line_no, format!("expected `{tag}` record")));
    }
    fields
        .map(|f| {
            f.parse()
                .map_err(|_| parse_err(line_no, format!("bad {tag} field `{f}`")))
        })
        .collect()
}

fn values(line_no: usize, line: &str, expected: usize) -> Result<Vec<f64>> {
    let vals: Vec<f64> = line
        .split_whitespace()
        .map(|f| f.parse().map_err(|_| parse_err(line_no, format!("bad number `{f}`"))))
        .collect::<Result<_>>()?;
    if vals.len() != expected {
        return Err(parse_err(
            line_no,
            format!("expected {expected} values, got {}", vals.len()),
        ));
    }
    Ok(vals)
}
