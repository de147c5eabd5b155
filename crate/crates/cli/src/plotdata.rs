//! Figure data as CSV.
//!
//! Columns: `figure, ensemble, role, member, x, y, z, u, v, w, weight, next,
//! rate, cycling`.
//!
//! * `member` rows carry the coherence vector `(x, y, z)`, its offset from
//!   the steady state `(u, v, w)`, the occupation weight, the dominant
//!   outgoing transition (`next`, `rate`) and, for `K ≥ 3`, the sense
//!   (`ccw` or `cw`) in which the ensemble cycles in the figure's plane.
//! * one `steady_state` row per figure, at `u = v = w = 0`.
//! * `transition` rows (fig4 only) start at member `member`, point by
//!   `(u, v, w)` to member `next`, and carry the rate.
//!
//! Panels: fig1a–c are the `K = 2` ensembles, those inside a `u = 0` plane
//! first, each group ordered by total rate; fig1d repeats fig1a; fig2 and
//! fig3 are all `K = 3` ensembles; fig4a and fig4b are the `K = 3` and
//! `K = 4` ensembles with their transitions.

use std::fmt::Write as _;

use crate::bundle::{EnsembleRecord, ResultBundle};
use crate::CliError;

pub const FIGURES: [&str; 8] = ["fig1a", "fig1b", "fig1c", "fig1d", "fig2", "fig3", "fig4a", "fig4b"];

pub const HEADER: &str = "figure,ensemble,role,member,x,y,z,u,v,w,weight,next,rate,cycling";

/// Coordinates spanning the plane a figure is drawn in.
fn plane(figure: &str) -> (usize, usize) {
    match figure {
        "fig3" => (0, 2),
        "fig4a" | "fig4b" => (0, 1),
        _ => (1, 2),
    }
}

fn total_rate(e: &EnsembleRecord) -> f64 {
    e.kappa.iter().flatten().sum()
}

fn in_u0_plane(e: &EnsembleRecord, x_ss: &[f64]) -> bool {
    e.states.iter().all(|x| (x[0] - x_ss[0]).abs() <= 1e-7)
}

fn select<'a>(figure: &str, ens: &'a [EnsembleRecord], x_ss: &[f64]) -> Vec<(usize, &'a EnsembleRecord)> {
    let of_size = |k: usize| -> Vec<(usize, &EnsembleRecord)> {
        ens.iter().enumerate().filter(|(_, e)| e.states.len() == k).collect()
    };
    match figure {
        "fig1a" | "fig1b" | "fig1c" | "fig1d" => {
            let mut k2 = of_size(2);
            k2.sort_by(|(_, a), (_, b)| {
                in_u0_plane(b, x_ss)
                    .cmp(&in_u0_plane(a, x_ss))
                    .then(total_rate(a).total_cmp(&total_rate(b)))
            });
            let panel = match figure {
                "fig1b" => 1,
                "fig1c" => 2,
                _ => 0,
            };
            k2.into_iter().nth(panel).into_iter().collect()
        }
        "fig2" | "fig3" | "fig4a" => of_size(3),
        _ => of_size(4),
    }
}

/// Follows the largest outgoing rate from member 0 and returns the sign of
/// the enclosed area in the plane `(a, b)`.
fn cycling(e: &EnsembleRecord, x_ss: &[f64], (a, b): (usize, usize)) -> Option<&'static str> {
    let k = e.states.len();
    if k < 3 {
        return None;
    }
    let p = |i: usize| (e.states[i][a] - x_ss[a], e.states[i][b] - x_ss[b]);
    let mut area = 0.0;
    let mut cur = 0;
    for _ in 0..k {
        let nxt = next(e, cur)?;
        let (p0, p1) = (p(cur), p(nxt));
        area += p0.0 * p1.1 - p1.0 * p0.1;
        cur = nxt;
    }
    Some(if area >= 0.0 { "ccw" } else { "cw" })
}

fn next(e: &EnsembleRecord, from: usize) -> Option<usize> {
    (0..e.states.len())
        .filter(|&j| j != from && e.kappa[j][from] > 0.0)
        .max_by(|&i, &j| e.kappa[i][from].total_cmp(&e.kappa[j][from]))
}

pub fn figure_csv(bundle: &ResultBundle, figure: &str) -> Result<String, CliError> {
    if !FIGURES.contains(&figure) {
        return Err(CliError::usage(format!("unknown figure `{figure}` (expected one of {})", FIGURES.join(", "))));
    }
    if bundle.model.dim != 2 {
        return Err(CliError::usage("figure data is defined for qubit models"));
    }
    let x_ss = &bundle.model.x_ss;
    let ensembles = bundle.search.as_ref().map_or(&[][..], |s| &s.ensembles[..]);
    let chosen = select(figure, ensembles, x_ss);
    let mut out = format!("{HEADER}\n");
    if chosen.is_empty() {
        return Ok(out);
    }
    let transitions = figure.starts_with("fig4");
    for (idx, e) in &chosen {
        let sense = cycling(e, x_ss, plane(figure)).unwrap_or("");
        for (k, x) in e.states.iter().enumerate() {
            let (nxt, rate) = match next(e, k) {
                Some(j) => (j.to_string(), format!("{:?}", e.kappa[j][k])),
                None => (String::new(), String::new()),
            };
            let _ = writeln!(
                out,
                "{figure},{idx},member,{k},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{nxt},{rate},{sense}",
                x[0],
                x[1],
                x[2],
                x[0] - x_ss[0],
                x[1] - x_ss[1],
                x[2] - x_ss[2],
                e.occupations.get(k).copied().unwrap_or(f64::NAN),
            );
        }
        if transitions {
            for k in 0..e.states.len() {
                for j in 0..e.states.len() {
                    let rate = e.kappa[j][k];
                    if j == k || rate <= 0.0 {
                        continue;
                    }
                    let (from, to) = (&e.states[k], &e.states[j]);
                    let _ = writeln!(
                        out,
                        "{figure},{idx},transition,{k},{:?},{:?},{:?},{:?},{:?},{:?},,{j},{rate:?},{sense}",
                        from[0],
                        from[1],
                        from[2],
                        to[0] - from[0],
                        to[1] - from[1],
                        to[2] - from[2],
                    );
                }
            }
        }
    }
    let _ = writeln!(out, "{figure},,steady_state,,{:?},{:?},{:?},0.0,0.0,0.0,,,,", x_ss[0], x_ss[1], x_ss[2]);
    Ok(out)
}
