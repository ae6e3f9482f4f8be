use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DAYS_PER_WEEK: usize = 7;
pub const WEATHER_STATES: usize = 2;

/// Concatenated one-hot context codes for a window's anchor time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxiliaryCodes {
    slots_per_day: usize,
    values: Vec<f64>,
}

fn check_one_hot(name: &str, v: &[f64]) -> Result<()> {
    let ones = v.iter().filter(|&&x| x == 1.0).count();
    let zeros = v.iter().filter(|&&x| x == 0.0).count();
    if ones != 1 || ones + zeros != v.len() {
        return Err(Error::InvalidArgument(format!("{name} is not a one-hot vector: {v:?}")));
    }
    Ok(())
}

impl AuxiliaryCodes {
    /// Builds codes from explicit one-hots; an absent weather field is stored as zeros.
    pub fn from_one_hots(time_of_day: &[f64], day_of_week: &[f64], weather: Option<&[f64]>) -> Result<Self> {
        if time_of_day.is_empty() {
            return Err(Error::InvalidArgument("time_of_day one-hot is empty".into()));
        }
        check_one_hot("time_of_day", time_of_day)?;
        if day_of_week.len() != DAYS_PER_WEEK {
            return Err(Error::InvalidArgument(format!(
                "day_of_week has length {}, expected {DAYS_PER_WEEK}",
                day_of_week.len()
            )));
        }
        check_one_hot("day_of_week", day_of_week)?;
        let mut values = Vec::with_capacity(time_of_day.len() + DAYS_PER_WEEK + WEATHER_STATES);
        values.extend_from_slice(time_of_day);
        values.extend_from_slice(day_of_week);
        match weather {
            Some(w) => {
                if w.len() != WEATHER_STATES {
                    return Err(Error::InvalidArgument(format!(
                        "weather has length {}, expected {WEATHER_STATES}",
                        w.len()
                    )));
                }
                check_one_hot("weather", w)?;
                values.extend_from_slice(w);
            }
            None => values.extend([0.0; WEATHER_STATES]),
        }
        Ok(Self {
            slots_per_day: time_of_day.len(),
            values,
        })
    }

    pub fn from_indices(slot: usize, slots_per_day: usize, weekday: usize, bad_weather: Option<bool>) -> Result<Self> {
        if slot >= slots_per_day || weekday >= DAYS_PER_WEEK {
            return Err(Error::InvalidArgument(format!(
                "slot {slot}/{slots_per_day} or weekday {weekday} out of range"
            )));
        }
        let mut tod = vec![0.0; slots_per_day];
        tod[slot] = 1.0;
        let mut dow = [0.0; DAYS_PER_WEEK];
        dow[weekday] = 1.0;
        let w = bad_weather.map(|b| if b { [0.0, 1.0] } else { [1.0, 0.0] });
        Self::from_one_hots(&tod, &dow, w.as_ref().map(|w| &w[..]))
    }

    pub fn slots_per_day(&self) -> usize {
        self.slots_per_day
    }

    pub fn time_of_day(&self) -> usize {
        self.values[..self.slots_per_day].iter().position(|&x| x == 1.0).unwrap_or(0)
    }

    pub fn day_of_week(&self) -> usize {
        let s = self.slots_per_day;
        self.values[s..s + DAYS_PER_WEEK].iter().position(|&x| x == 1.0).unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        Tensor::from_parts(vec![1, self.values.len()], self.values.iter().map(|&v| S::lit(v)).collect())
    }
}

/// Two fully connected layers mapping codes to a `1 × T × N` feature map.
#[derive(Clone, Debug)]
pub struct AuxEmbedding {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub code_len: usize,
    pub hidden: usize,
    pub steps: usize,
    pub nodes: usize,
}

impl AuxEmbedding {
    #[allow(clippy::too_many_arguments)]
    pub fn register<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        slots_per_day: usize,
        hidden: usize,
        steps: usize,
        nodes: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let code_len = slots_per_day + DAYS_PER_WEEK + WEATHER_STATES;
        let out = steps * nodes;
        let w1 = store.insert_glorot(format!("{prefix}.fc0.weight"), &[code_len, hidden], code_len, hidden, rng)?;
        let b1 = store.insert_zeros(format!("{prefix}.fc0.bias"), &[hidden])?;
        let w2 = store.insert_glorot(format!("{prefix}.fc1.weight"), &[hidden, out], hidden, out, rng)?;
        let b2 = store.insert_zeros(format!("{prefix}.fc1.bias"), &[out])?;
        Ok(Self {
            w1,
            b1,
            w2,
            b2,
            code_len,
            hidden,
            steps,
            nodes,
        })
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, params: &Bound, codes: &AuxiliaryCodes) -> Result<Var> {
        if codes.len() != self.code_len {
            return Err(Error::ShapeMismatch {
                op: "aux_embed",
                left: vec![self.code_len],
                right: vec![codes.len()],
            });
        }
        let c = tape.constant(codes.to_tensor());
        let h = tape.matmul(c, params.var(self.w1))?;
        let h = tape.reshape(h, &[self.hidden])?;
        let h = tape.add(h, params.var(self.b1))?;
        let h = tape.relu(h)?;
        let h = tape.reshape(h, &[1, self.hidden])?;
        let o = tape.matmul(h, params.var(self.w2))?;
        let o = tape.reshape(o, &[self.steps * self.nodes])?;
        let o = tape.add(o, params.var(self.b2))?;
        tape.reshape(o, &[1, self.steps, self.nodes])
    }
}
