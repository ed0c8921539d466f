use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{severity_of, validate_conditions, Condition, ConditionSet, EcgRecord, GeneratorConfig};
use crate::error::Result;
use crate::rng;

// Stream tags under the generator seed.
const LABELS: u64 = 0;
const SUBJECT: u64 = 1;
const RECORDING: u64 = 2;
const FOLLOWUP: u64 = 3;

// Base per-lead gains for the P wave, QRS complex and T wave (12-lead layout
// I, II, III, aVR, aVL, aVF, V1..V6). Extra leads cycle through the table.
const GAIN_P: [f64; 12] = [0.8, 1.0, 0.3, -0.8, 0.4, 0.7, 0.3, 0.5, 0.6, 0.7, 0.7, 0.6];
const GAIN_QRS: [f64; 12] = [0.9, 1.1, 0.4, -0.9, 0.3, 0.8, -0.5, 0.2, 0.7, 1.1, 1.0, 0.8];
const GAIN_T: [f64; 12] = [0.8, 1.0, 0.3, -0.8, 0.4, 0.7, -0.2, 0.4, 0.8, 0.9, 0.8, 0.7];

const LOWVOLT_SCALE: f64 = 0.3;
const NOISE_STD: f64 = 0.008;
const WANDER_AMP: f64 = 0.03;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Everything about a synthetic subject that stays fixed across visits.
/// All fields are drawn unconditionally and in a fixed order so that the
/// same subject can be rendered under any condition set.
struct Subject {
    gains: Vec<[f64; 3]>,
    amp: f64,
    qrs_width: f64,
    hr_sinus: f64,
    hr_brady: f64,
    hr_tachy: f64,
    hr_afib: f64,
    phase: f64,
    wander_hz: f64,
    wander_phase: Vec<f64>,
    fib_hz: f64,
}

impl Subject {
    fn draw(config: &GeneratorConfig, subject: u64) -> Self {
        let mut r = rng::stream(config.seed, &[SUBJECT, subject]);
        let gains = (0..config.leads)
            .map(|l| {
                let b = l % 12;
                let mut jitter = || 1.0 + 0.1 * normal(&mut r);
                [GAIN_P[b] * jitter(), GAIN_QRS[b] * jitter(), GAIN_T[b] * jitter()]
            })
            .collect();
        Subject {
            gains,
            amp: r.random_range(0.85..1.15),
            qrs_width: r.random_range(0.9..1.1),
            hr_sinus: r.random_range(62.0..95.0),
            hr_brady: r.random_range(42.0..54.0),
            hr_tachy: r.random_range(120.0..148.0),
            hr_afib: r.random_range(75.0..115.0),
            phase: r.random_range(0.0..0.25),
            wander_hz: r.random_range(0.15..0.35),
            wander_phase: (0..config.leads).map(|_| r.random_range(0.0..std::f64::consts::TAU)).collect(),
            fib_hz: r.random_range(5.0..7.0),
        }
    }
}

/// One Gaussian bump: centre offset from the R peak (s), width (s), amplitude.
#[derive(Clone, Copy)]
struct Wave {
    mu: f64,
    sigma: f64,
    amp: f64,
}

fn bump(w: Wave, s: f64) -> f64 {
    let z = (s - w.mu) / w.sigma;
    w.amp * (-0.5 * z * z).exp()
}

fn render(config: &GeneratorConfig, subject: u64, visit: u64, conditions: &ConditionSet) -> Vec<f64> {
    let sub = Subject::draw(config, subject);
    let mut r = rng::stream(config.seed, &[RECORDING, subject, visit]);
    let afib = conditions.contains(&Condition::Afib);
    let hr = if afib {
        sub.hr_afib
    } else if conditions.contains(&Condition::Sbrad) {
        sub.hr_brady
    } else if conditions.contains(&Condition::Stach) {
        sub.hr_tachy
    } else {
        sub.hr_sinus
    };
    let rr_mean = 60.0 / hr;
    let duration = config.samples() as f64 / config.rate_hz;

    // R-peak times, starting one beat before the window so early T waves exist.
    let mut beats = Vec::new();
    let mut t = sub.phase * rr_mean - rr_mean;
    while t < duration + rr_mean {
        let rr = if afib {
            rr_mean * r.random_range(0.55..1.45)
        } else {
            rr_mean * (1.0 + 0.02 * normal(&mut r))
        };
        beats.push((t, rr));
        t += rr;
    }

    let widen = if conditions.contains(&Condition::WideQrs) { 2.0 } else { 1.0 } * sub.qrs_width;
    let t_sign = if conditions.contains(&Condition::TwaveInv) { -1.0 } else { 1.0 };
    let scale = sub.amp * if conditions.contains(&Condition::LowVolt) { LOWVOLT_SCALE } else { 1.0 };
    let fib_phase = r.random_range(0.0..std::f64::consts::TAU);

    let n = config.samples();
    let mut values = vec![0.0; config.leads * n];
    for (l, g) in sub.gains.iter().enumerate() {
        let [gp, gq, gt] = *g;
        let row = &mut values[l * n..(l + 1) * n];
        for &(tb, rr) in &beats {
            let waves = [
                Wave { mu: -0.17, sigma: 0.022, amp: if afib { 0.0 } else { 0.14 * gp } },
                Wave { mu: -0.028 * widen, sigma: 0.009 * widen, amp: -0.12 * gq },
                Wave { mu: 0.0, sigma: 0.011 * widen, amp: gq },
                Wave { mu: 0.028 * widen, sigma: 0.009 * widen, amp: -0.28 * gq },
                Wave { mu: (0.26 * rr.sqrt()).clamp(0.16, 0.34), sigma: 0.045, amp: 0.3 * t_sign * gt },
            ];
            // Only samples within 0.5 s of the peak are touched.
            let lo = (((tb - 0.5) * config.rate_hz).floor().max(0.0)) as usize;
            let hi = ((((tb + 0.5) * config.rate_hz).ceil()).max(0.0) as usize).min(n);
            for (i, v) in row.iter_mut().enumerate().take(hi).skip(lo) {
                let s = i as f64 / config.rate_hz - tb;
                *v += waves.iter().map(|w| bump(*w, s)).sum::<f64>();
            }
        }
        for (i, v) in row.iter_mut().enumerate() {
            let t = i as f64 / config.rate_hz;
            let mut x = *v;
            if afib {
                x += 0.05 * gp.abs() * (std::f64::consts::TAU * sub.fib_hz * t + fib_phase + l as f64).sin();
            }
            x *= scale;
            x += WANDER_AMP * (std::f64::consts::TAU * sub.wander_hz * t + sub.wander_phase[l]).sin();
            x += NOISE_STD * normal(&mut r);
            // Samples are stored as f32 in the archive; quantize up front so
            // that an archive round trip is exact.
            *v = x as f32 as f64;
        }
    }
    values
}

fn draw_conditions(config: &GeneratorConfig, r: &mut ChaCha8Rng) -> ConditionSet {
    if r.random::<f64>() >= config.prob_sick {
        return [Condition::Normal].into_iter().collect();
    }
    let p = &config.priors;
    for _ in 0..1000 {
        let mut set = ConditionSet::new();
        let u: f64 = r.random();
        if u < p.afib {
            set.insert(Condition::Afib);
        } else if u < p.afib + p.sbrad {
            set.insert(Condition::Sbrad);
        } else if u < p.afib + p.sbrad + p.stach {
            set.insert(Condition::Stach);
        }
        for c in [Condition::LowVolt, Condition::TwaveInv, Condition::WideQrs] {
            if r.random::<f64>() < p.get(c) {
                set.insert(c);
            }
        }
        if !set.is_empty() {
            return set;
        }
    }
    // Vanishing priors: fall back to the most likely abnormality.
    let best = Condition::ABNORMAL
        .into_iter()
        .max_by(|a, b| p.get(*a).total_cmp(&p.get(*b)))
        .unwrap_or(Condition::Afib);
    [best].into_iter().collect()
}

pub(crate) fn subject_id(subject: u64) -> String {
    format!("s{subject:05}")
}

pub(crate) fn record_id(subject: u64, visit: u64) -> String {
    format!("s{subject:05}-v{visit}")
}

fn build(config: &GeneratorConfig, subject: u64, visit: u64, conditions: ConditionSet) -> EcgRecord {
    EcgRecord {
        id: record_id(subject, visit),
        subject_id: subject_id(subject),
        leads: config.leads,
        samples: config.samples(),
        sample_rate_hz: config.rate_hz,
        values: render(config, subject, visit, &conditions),
        stratum: severity_of(&conditions),
        conditions,
    }
}

/// A first-visit record for subject `record_seed`; stratum and conditions
/// are drawn from the configured priors.
pub fn synth_ecg(config: &GeneratorConfig, record_seed: u64) -> EcgRecord {
    let mut r = rng::stream(config.seed, &[LABELS, record_seed]);
    let conditions = draw_conditions(config, &mut r);
    build(config, record_seed, 0, conditions)
}

/// Same subject and noise as [`synth_ecg`] but with forced conditions.
pub fn synth_ecg_with(config: &GeneratorConfig, record_seed: u64, conditions: &ConditionSet) -> Result<EcgRecord> {
    validate_conditions(conditions)?;
    Ok(build(config, record_seed, 0, conditions.clone()))
}

/// Second visit of the subject behind `first`: conditions stay, gain an
/// onset, or lose one abnormality. Morphology parameters are shared.
pub fn synth_followup(config: &GeneratorConfig, record_seed: u64, first: &ConditionSet) -> EcgRecord {
    let mut r = rng::stream(config.seed, &[FOLLOWUP, record_seed]);
    let u: f64 = r.random();
    let sick: Vec<Condition> = first.iter().copied().filter(|c| *c != Condition::Normal).collect();
    let mut next: ConditionSet = sick.iter().copied().collect();
    // Healthy subjects only develop findings at a rate tied to prob_sick.
    let onset = if sick.is_empty() { u < 0.6 * config.prob_sick } else { (0.4..0.7).contains(&u) };
    let resolve = !sick.is_empty() && u >= 0.7;
    if onset {
        let absent: Vec<Condition> = Condition::ABNORMAL.into_iter().filter(|c| !next.contains(c)).collect();
        if !absent.is_empty() {
            let c = absent[r.random_range(0..absent.len())];
            if c.is_rhythm() {
                next.retain(|x| !x.is_rhythm());
            }
            next.insert(c);
        }
    } else if resolve {
        let c = sick[r.random_range(0..sick.len())];
        next.remove(&c);
    }
    if next.is_empty() {
        next.insert(Condition::Normal);
    }
    build(config, record_seed, 1, next)
}

/// Per-lead affine map onto [0, 1]; constant leads become zeros.
pub fn minmax_normalize(record: &EcgRecord) -> EcgRecord {
    let mut out = record.clone();
    for row in out.values.chunks_mut(record.samples.max(1)) {
        let (lo, hi) = row.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        let range = hi - lo;
        for x in row.iter_mut() {
            *x = if range > 0.0 { (*x - lo) / range } else { 0.0 };
        }
    }
    out
}

/// Linear interpolation onto `round(T · target/source)` samples with both
/// endpoints aligned.
pub fn resample(record: &EcgRecord, target_hz: f64) -> Result<EcgRecord> {
    if !(target_hz > 0.0) {
        return Err(crate::error::Error::Config(format!("target rate {target_hz} must be positive")));
    }
    if target_hz == record.sample_rate_hz {
        return Ok(record.clone());
    }
    let t_old = record.samples;
    let t_new = ((t_old as f64) * target_hz / record.sample_rate_hz).round().max(1.0) as usize;
    let mut values = Vec::with_capacity(record.leads * t_new);
    for l in 0..record.leads {
        let row = record.lead(l);
        for j in 0..t_new {
            let x = if t_new == 1 { 0.0 } else { (j * (t_old - 1)) as f64 / (t_new - 1) as f64 };
            let i = (x.floor() as usize).min(t_old - 1);
            let frac = x - i as f64;
            let v = if frac == 0.0 || i + 1 >= t_old { row[i] } else { row[i] + frac * (row[i + 1] - row[i]) };
            values.push(v);
        }
    }
    Ok(EcgRecord { samples: t_new, sample_rate_hz: target_hz, values, ..record.clone() })
}
