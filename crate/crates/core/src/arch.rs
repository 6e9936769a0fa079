//! Architecture descriptions and their fixed-length numeric encoding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nn::Activation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CellType {
    Rnn,
    Gru,
    Lstm,
}

impl CellType {
    pub const ALL: [CellType; 3] = [CellType::Rnn, CellType::Gru, CellType::Lstm];

    pub fn name(self) -> &'static str {
        match self {
            CellType::Rnn => "RNN",
            CellType::Gru => "GRU",
            CellType::Lstm => "LSTM",
        }
    }

    /// Number of stacked gate/candidate projections.
    pub fn n_gates(self) -> usize {
        match self {
            CellType::Rnn => 1,
            CellType::Gru => 3,
            CellType::Lstm => 4,
        }
    }
}

pub const MAX_LAYERS: usize = 3;
pub const WIDTH_MIN: usize = 64;
pub const WIDTH_MAX: usize = 256;
pub const WIDTH_STEP: usize = 32;
pub const DROPOUT_STEP: f64 = 0.05;
pub const DROPOUT_MAX: f64 = 0.3;
pub const KERNEL_SETS: [&[usize]; 4] = [&[3], &[3, 5], &[3, 5, 7], &[5, 7]];
pub const RANGE_LOOKBACKS: [usize; 4] = [4, 8, 16, 32];
pub const GATE_WIDTHS: [usize; 3] = [8, 16, 32];
pub const PARAM_CAP: usize = 5_000_000;

/// Encoded length: 3 one-hot cell slots, 3 widths, depth, dropout,
/// 2 activation flags, 3 block flags, kernel set, lookback, gate width, skip flag.
pub const ENCODING_DIM: usize = MAX_LAYERS * 3 + MAX_LAYERS + 1 + 1 + 2 + 3 + 1 + 1 + 1 + 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    /// One cell type per layer; its length is the depth.
    pub cells: Vec<CellType>,
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub activation: Activation,
    /// Enabled flags for the volatility, trend and range blocks.
    pub blocks: [bool; 3],
    /// Index into [`KERNEL_SETS`].
    pub kernel_set: usize,
    pub range_lookback: usize,
    pub gate_width: usize,
    pub skip_scaling: bool,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self {
            cells: vec![CellType::Gru, CellType::Lstm],
            hidden: vec![256, 128],
            dropout: 0.1,
            activation: Activation::Gelu,
            blocks: [true; 3],
            kernel_set: 2,
            range_lookback: 16,
            gate_width: 16,
            skip_scaling: true,
        }
    }
}

fn dropout_steps(d: f64) -> Option<usize> {
    let k = (d / DROPOUT_STEP).round();
    ((d - k * DROPOUT_STEP).abs() < 1e-9 && (0.0..=DROPOUT_MAX / DROPOUT_STEP + 1e-9).contains(&k)).then_some(k as usize)
}

impl ArchSpec {
    pub fn n_layers(&self) -> usize {
        self.cells.len()
    }

    pub fn kernels(&self) -> &'static [usize] {
        KERNEL_SETS[self.kernel_set]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Arch(m));
        if self.cells.is_empty() || self.cells.len() > MAX_LAYERS {
            return bad(format!("depth {} outside 1..={MAX_LAYERS}", self.cells.len()));
        }
        if self.hidden.len() != self.cells.len() {
            return bad("one hidden size per layer required".into());
        }
        for &h in &self.hidden {
            if !(WIDTH_MIN..=WIDTH_MAX).contains(&h) || (h - WIDTH_MIN) % WIDTH_STEP != 0 {
                return bad(format!("hidden size {h} not on the {WIDTH_MIN}..={WIDTH_MAX} step-{WIDTH_STEP} grid"));
            }
        }
        if dropout_steps(self.dropout).is_none() {
            return bad(format!("dropout {} not a multiple of {DROPOUT_STEP} in [0, {DROPOUT_MAX}]", self.dropout));
        }
        if !self.blocks.iter().any(|&b| b) {
            return bad("at least one block must be enabled".into());
        }
        if self.kernel_set >= KERNEL_SETS.len() {
            return bad(format!("kernel set {} unknown", self.kernel_set));
        }
        if !RANGE_LOOKBACKS.contains(&self.range_lookback) {
            return bad(format!("range lookback {} not in {RANGE_LOOKBACKS:?}", self.range_lookback));
        }
        if !GATE_WIDTHS.contains(&self.gate_width) {
            return bad(format!("gate width {} not in {GATE_WIDTHS:?}", self.gate_width));
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<f64> {
        let mut v = vec![0.0; ENCODING_DIM];
        for (slot, cell) in self.cells.iter().enumerate() {
            v[slot * 3 + *cell as usize] = 1.0;
        }
        let w0 = MAX_LAYERS * 3;
        for (slot, &h) in self.hidden.iter().enumerate() {
            v[w0 + slot] = h as f64 / WIDTH_MAX as f64;
        }
        let mut i = w0 + MAX_LAYERS;
        v[i] = self.n_layers() as f64 / MAX_LAYERS as f64;
        i += 1;
        v[i] = self.dropout;
        i += 1;
        v[i + self.activation as usize] = 1.0;
        i += 2;
        for (k, &b) in self.blocks.iter().enumerate() {
            v[i + k] = b as u8 as f64;
        }
        i += 3;
        v[i] = self.kernel_set as f64 / (KERNEL_SETS.len() - 1) as f64;
        v[i + 1] = self.range_lookback as f64 / 32.0;
        v[i + 2] = self.gate_width as f64 / 32.0;
        v[i + 3] = self.skip_scaling as u8 as f64;
        v
    }

    pub fn decode(v: &[f64]) -> Result<ArchSpec> {
        let bad = |m: String| Err(CoreError::Arch(format!("cannot decode encoding: {m}")));
        if v.len() != ENCODING_DIM {
            return bad(format!("length {} instead of {ENCODING_DIM}", v.len()));
        }
        if let Some(i) = v.iter().position(|x| !(0.0..=1.0).contains(x)) {
            return bad(format!("component {i} = {} outside [0, 1]", v[i]));
        }
        let grid = |x: f64, scale: f64| -> Option<usize> {
            let k = (x * scale).round();
            ((x * scale - k).abs() < 1e-6).then_some(k as usize)
        };
        let w0 = MAX_LAYERS * 3;
        let mut i = w0 + MAX_LAYERS;
        let depth = match grid(v[i], MAX_LAYERS as f64) {
            Some(d) if (1..=MAX_LAYERS).contains(&d) => d,
            _ => return bad(format!("depth component {}", v[i])),
        };
        let flag = |x: f64| -> Option<bool> {
            if x == 0.0 {
                Some(false)
            } else if x == 1.0 {
                Some(true)
            } else {
                None
            }
        };
        let mut cells = Vec::new();
        let mut hidden = Vec::new();
        for slot in 0..MAX_LAYERS {
            let oh = &v[slot * 3..slot * 3 + 3];
            let hv = v[w0 + slot];
            if slot >= depth {
                if oh.iter().any(|&x| x != 0.0) || hv != 0.0 {
                    return bad(format!("unused layer slot {slot} is not zero"));
                }
                continue;
            }
            let ones: Vec<usize> = (0..3).filter(|&k| oh[k] == 1.0).collect();
            if ones.len() != 1 || oh.iter().any(|&x| x != 0.0 && x != 1.0) {
                return bad(format!("layer slot {slot} is not one-hot"));
            }
            cells.push(CellType::ALL[ones[0]]);
            match grid(hv, WIDTH_MAX as f64) {
                Some(h) => hidden.push(h),
                None => return bad(format!("width component {hv}")),
            }
        }
        i += 1;
        let dropout = match dropout_steps(v[i]) {
            Some(k) => k as f64 * DROPOUT_STEP,
            None => return bad(format!("dropout component {}", v[i])),
        };
        i += 1;
        let activation = match (flag(v[i]), flag(v[i + 1])) {
            (Some(true), Some(false)) => Activation::Relu,
            (Some(false), Some(true)) => Activation::Gelu,
            _ => return bad("activation is not one-hot".into()),
        };
        i += 2;
        let mut blocks = [false; 3];
        for k in 0..3 {
            blocks[k] = match flag(v[i + k]) {
                Some(b) => b,
                None => return bad(format!("block flag {k}")),
            };
        }
        i += 3;
        let kernel_set = match grid(v[i], (KERNEL_SETS.len() - 1) as f64) {
            Some(k) => k,
            None => return bad(format!("kernel-set component {}", v[i])),
        };
        let range_lookback = grid(v[i + 1], 32.0).unwrap_or(0);
        let gate_width = grid(v[i + 2], 32.0).unwrap_or(0);
        let skip_scaling = match flag(v[i + 3]) {
            Some(b) => b,
            None => return bad("skip flag".into()),
        };
        let arch = ArchSpec {
            cells,
            hidden,
            dropout,
            activation,
            blocks,
            kernel_set,
            range_lookback,
            gate_width,
            skip_scaling,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// Uniform draw over the discrete space.
    pub fn random<R: Rng>(rng: &mut R) -> ArchSpec {
        let depth = rng.random_range(1..=MAX_LAYERS);
        let n_widths = (WIDTH_MAX - WIDTH_MIN) / WIDTH_STEP + 1;
        let blocks = loop {
            let b = [rng.random_bool(0.5), rng.random_bool(0.5), rng.random_bool(0.5)];
            if b.iter().any(|&x| x) {
                break b;
            }
        };
        ArchSpec {
            cells: (0..depth).map(|_| CellType::ALL[rng.random_range(0..3)]).collect(),
            hidden: (0..depth)
                .map(|_| WIDTH_MIN + WIDTH_STEP * rng.random_range(0..n_widths))
                .collect(),
            dropout: rng.random_range(0..=6) as f64 * DROPOUT_STEP,
            activation: if rng.random_bool(0.5) { Activation::Relu } else { Activation::Gelu },
            blocks,
            kernel_set: rng.random_range(0..KERNEL_SETS.len()),
            range_lookback: RANGE_LOOKBACKS[rng.random_range(0..RANGE_LOOKBACKS.len())],
            gate_width: GATE_WIDTHS[rng.random_range(0..GATE_WIDTHS.len())],
            skip_scaling: rng.random_bool(0.5),
        }
    }

    /// Changes one or two randomly chosen attributes, always returning a
    /// valid spec that differs from `self`.
    pub fn mutate<R: Rng>(&self, rng: &mut R) -> ArchSpec {
        loop {
            let a = self.mutate_once(rng);
            if a != *self {
                return a;
            }
        }
    }

    fn mutate_once<R: Rng>(&self, rng: &mut R) -> ArchSpec {
        let mut a = self.clone();
        let n_changes = rng.random_range(1..=2);
        let n_widths = (WIDTH_MAX - WIDTH_MIN) / WIDTH_STEP + 1;
        for _ in 0..n_changes {
            match rng.random_range(0..10) {
                0 => {
                    let slot = rng.random_range(0..a.cells.len());
                    a.cells[slot] = CellType::ALL[rng.random_range(0..3)];
                }
                1 => {
                    let slot = rng.random_range(0..a.hidden.len());
                    a.hidden[slot] = WIDTH_MIN + WIDTH_STEP * rng.random_range(0..n_widths);
                }
                2 => {
                    let depth = rng.random_range(1..=MAX_LAYERS);
                    while a.cells.len() > depth {
                        a.cells.pop();
                        a.hidden.pop();
                    }
                    while a.cells.len() < depth {
                        a.cells.push(CellType::ALL[rng.random_range(0..3)]);
                        a.hidden.push(WIDTH_MIN + WIDTH_STEP * rng.random_range(0..n_widths));
                    }
                }
                3 => a.dropout = rng.random_range(0..=6) as f64 * DROPOUT_STEP,
                4 => {
                    a.activation = match a.activation {
                        Activation::Relu => Activation::Gelu,
                        Activation::Gelu => Activation::Relu,
                    }
                }
                5 => {
                    let k = rng.random_range(0..3);
                    a.blocks[k] = !a.blocks[k];
                    if !a.blocks.iter().any(|&b| b) {
                        a.blocks[(k + 1) % 3] = true;
                    }
                }
                6 => a.kernel_set = rng.random_range(0..KERNEL_SETS.len()),
                7 => a.range_lookback = RANGE_LOOKBACKS[rng.random_range(0..RANGE_LOOKBACKS.len())],
                8 => a.gate_width = GATE_WIDTHS[rng.random_range(0..GATE_WIDTHS.len())],
                _ => a.skip_scaling = !a.skip_scaling,
            }
        }
        a
    }

    /// Compact human-readable description, e.g. `GRU256-LSTM128 d0.10 VTR`.
    pub fn summary(&self) -> String {
        let layers: Vec<String> = self
            .cells
            .iter()
            .zip(&self.hidden)
            .map(|(c, h)| format!("{}{h}", c.name()))
            .collect();
        let blocks: String = ["V", "T", "R"]
            .iter()
            .zip(&self.blocks)
            .filter(|(_, &on)| on)
            .map(|(s, _)| *s)
            .collect();
        format!("{} d{:.2} {}", layers.join("-"), self.dropout, blocks)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_is_valid_and_round_trips() {
        let a = ArchSpec::default();
        a.validate().unwrap();
        assert_eq!(ArchSpec::decode(&a.encode()).unwrap(), a);
    }

    #[test]
    fn mutations_stay_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut a = ArchSpec::default();
        for _ in 0..500 {
            a = a.mutate(&mut rng);
            a.validate().unwrap();
        }
    }
}
