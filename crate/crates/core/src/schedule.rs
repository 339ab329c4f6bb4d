//! Approximation schedules: a periodic `(conv layer, batch phase)` grid
//! naming the filter-gradient method for every cell.
//!
//! Layer indices count a network's main-path convolutions in definition
//! order, starting at 0 for the first convolution.
//!
//! Schedule files are line oriented:
//!
//! ```text
//! period 2
//! # comment
//! layer 1 phase 1 topk
//! ```
//!
//! Omitted cells are `full`.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::approx::MethodKind;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    period: usize,
    num_layers: usize,
    // layer-major: grid[layer * period + phase]
    grid: Vec<MethodKind>,
}

/// The three built-in schedules, each approximating a quarter of the cells
/// (schedule 1 only approximately, depending on the layer count).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Builtin {
    /// Every fourth layer starting at layer 1, every batch.
    Schedule1,
    /// Odd layers on odd batches.
    Schedule2,
    /// Every layer on every fourth batch.
    Schedule3,
}

impl FromStr for Builtin {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "schedule1" => Ok(Builtin::Schedule1),
            "schedule2" => Ok(Builtin::Schedule2),
            "schedule3" => Ok(Builtin::Schedule3),
            _ => Err(Error::invalid(format!(
                "unknown schedule `{s}` (expected schedule1, schedule2 or schedule3)"
            ))),
        }
    }
}

impl Schedule {
    /// All-`full` schedule.
    pub fn full(num_layers: usize, period: usize) -> Result<Self> {
        if period == 0 {
            return Err(Error::invalid("schedule period must be positive"));
        }
        Ok(Schedule {
            period,
            num_layers,
            grid: vec![MethodKind::Full; num_layers * period],
        })
    }

    pub fn builtin(which: Builtin, num_layers: usize, method: MethodKind) -> Result<Self> {
        if num_layers == 0 {
            return Err(Error::invalid("built-in schedules need at least one layer"));
        }
        let mut s = match which {
            Builtin::Schedule1 => Schedule::full(num_layers, 1)?,
            Builtin::Schedule2 => Schedule::full(num_layers, 2)?,
            Builtin::Schedule3 => Schedule::full(num_layers, 4)?,
        };
        for layer in 0..num_layers {
            for phase in 0..s.period {
                let on = match which {
                    Builtin::Schedule1 => layer % 4 == 1,
                    Builtin::Schedule2 => layer % 2 == 1 && phase % 2 == 1,
                    Builtin::Schedule3 => phase == 0,
                };
                if on {
                    s.set(layer, phase, method)?;
                }
            }
        }
        Ok(s)
    }

    /// Resolves `name` as a built-in.
    pub fn named(name: &str, num_layers: usize, method: MethodKind) -> Result<Self> {
        Schedule::builtin(name.parse()?, num_layers, method)
    }

    pub fn period(&self) -> usize {
        self.period
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn set(&mut self, layer: usize, phase: usize, method: MethodKind) -> Result<()> {
        self.check_layer(layer)?;
        if phase >= self.period {
            return Err(Error::invalid(format!("phase {phase} outside period {}", self.period)));
        }
        self.grid[layer * self.period + phase] = method;
        Ok(())
    }

    pub fn cell(&self, layer: usize, phase: usize) -> MethodKind {
        self.grid[layer * self.period + phase]
    }

    /// Method for `layer` at global training step `step`.
    pub fn method_for(&self, layer: usize, step: u64) -> Result<MethodKind> {
        self.check_layer(layer)?;
        Ok(self.cell(layer, (step % self.period as u64) as usize))
    }

    /// Share of cells that are not `full`.
    pub fn approx_fraction(&self) -> f64 {
        if self.grid.is_empty() {
            return 0.0;
        }
        let approx = self.grid.iter().filter(|m| m.is_approx()).count();
        approx as f64 / self.grid.len() as f64
    }

    /// Layers with at least one non-`full` cell.
    pub fn approximated_layers(&self) -> Vec<usize> {
        (0..self.num_layers)
            .filter(|&l| (0..self.period).any(|p| self.cell(l, p).is_approx()))
            .collect()
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.num_layers {
            return Err(Error::invalid(format!(
                "layer {layer} outside schedule of {} layers",
                self.num_layers
            )));
        }
        Ok(())
    }

    /// Parses a schedule file for a network with `num_layers` conv layers.
    pub fn parse(text: &str, num_layers: usize) -> Result<Self> {
        let mut schedule: Option<Schedule> = None;
        let mut seen = HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let err = |message: String| Error::Parse {
                line: line_no,
                message,
            };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let words: Vec<&str> = line.split_whitespace().collect();
            let Some(s) = schedule.as_mut() else {
                match words.as_slice() {
                    ["period", p] => {
                        let period: usize = p
                            .parse()
                            .map_err(|_| err(format!("bad period `{p}`")))?;
                        if period == 0 {
                            return Err(err("period must be positive".into()));
                        }
                        schedule = Some(Schedule::full(num_layers, period)?);
                        continue;
                    }
                    _ => return Err(err(format!("expected `period <P>`, found `{line}`"))),
                }
            };
            let ["layer", layer, "phase", phase, method] = words.as_slice() else {
                return Err(err(format!(
                    "expected `layer <i> phase <p> <method>`, found `{line}`"
                )));
            };
            let layer: usize = layer
                .parse()
                .map_err(|_| err(format!("bad layer index `{layer}`")))?;
            let phase: usize = phase
                .parse()
                .map_err(|_| err(format!("bad phase `{phase}`")))?;
            let method: MethodKind = method.parse().map_err(|e: Error| err(e.to_string()))?;
            if phase >= s.period {
                return Err(err(format!("phase {phase} >= period {}", s.period)));
            }
            if layer >= num_layers {
                return Err(err(format!("layer {layer} >= layer count {num_layers}")));
            }
            if !seen.insert((layer, phase)) {
                return Err(err(format!("layer {layer} phase {phase} assigned twice")));
            }
            s.set(layer, phase, method)?;
        }
        schedule.ok_or(Error::Parse {
            line: text.lines().count().max(1),
            message: "missing `period <P>` line".into(),
        })
    }

    /// Canonical file form: the period line, then every non-`full` cell in
    /// `(layer, phase)` order.
    pub fn emit(&self) -> String {
        let mut out = format!("period {}\n", self.period);
        for layer in 0..self.num_layers {
            for phase in 0..self.period {
                let m = self.cell(layer, phase);
                if m.is_approx() {
                    let _ = writeln!(out, "layer {layer} phase {phase} {m}");
                }
            }
        }
        out
    }

    /// Text grid, one row per layer and one column per phase:
    /// `.` full, `Z` zero, `R` random, `T` topk.
    pub fn render_grid(&self) -> String {
        let mut out = String::from("layer  ");
        for phase in 0..self.period {
            let _ = write!(out, "{}", phase % 10);
        }
        out.push('\n');
        for layer in 0..self.num_layers {
            let _ = write!(out, "{layer:>5}  ");
            for phase in 0..self.period {
                out.push(match self.cell(layer, phase) {
                    MethodKind::Full => '.',
                    MethodKind::Zero => 'Z',
                    MethodKind::Random => 'R',
                    MethodKind::TopK => 'T',
                });
            }
            out.push('\n');
        }
        let _ = writeln!(out, "approx_fraction {:.4}", self.approx_fraction());
        out
    }
}
