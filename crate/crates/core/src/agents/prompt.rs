//! Text prompt for language-model backends.

use std::fmt::Write;

use super::message::Message;
use super::observation::{Observation, RegionSummary};
use crate::scenario::Strategy;

const PER_100K: f64 = 1e5;

fn number_word(n: usize) -> String {
    const WORDS: [&str; 13] = [
        "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
        "eleven", "twelve",
    ];
    WORDS.get(n).map_or_else(|| n.to_string(), |w| w.to_string())
}

fn stats_line(out: &mut String, s: &RegionSummary, local: bool) {
    let st = &s.state;
    let rt = s.rt.map_or("n/a".to_string(), |v| format!("{v:.2}"));
    let _ = writeln!(
        out,
        "- {} ({}){}: S={:.0}, E={:.0}, I={:.0}, Q={:.0}, R={:.0}, D={:.0}; \
         daily incidence {:.2} per 100k (trend x{:.2}); daily deaths {:.3} per 100k; \
         active cases {:.2} per 100k; R_t {}",
        s.name,
        s.code,
        if local { " [this state]" } else { "" },
        st.s,
        st.e,
        st.i,
        st.q,
        st.r,
        st.d,
        s.ir * PER_100K,
        s.ir_growth,
        s.dr * PER_100K,
        s.acr * PER_100K,
        rt,
    );
}

/// Renders the structured prompt: system guidance, inputs, constraints and
/// the required output schema. The peer-message block appears only when
/// `messages` is non-empty.
pub fn render_prompt(obs: &Observation, messages: &[Message], strategy: Strategy) -> String {
    let mut out = String::new();
    let name = &obs.name;
    let weeks = obs.horizon_weeks;
    let days = obs.horizon_days;

    out.push_str("# System Guidance:\n");
    let _ = writeln!(
        out,
        "You are the epidemic control and mobility policy assistant for the state of {name}."
    );
    match strategy {
        Strategy::Tir => {
            let _ = writeln!(
                out,
                "Recommend travel controls that slow the spread of disease into {name}. For every \
                 origin state listed below, decide how its inbound travel into {name} is spread \
                 across the next {weeks} weeks. The total inbound volume over the {weeks} weeks \
                 is fixed at the baseline; only the weekly proportions can change."
            );
        }
        Strategy::Sis => {
            let _ = writeln!(
                out,
                "Recommend travel controls that slow the spread of disease into {name}. Choose \
                 one origin state whose inbound travel into {name} is cut to {:.0}% of its \
                 baseline for the next {} days.",
                obs.policy.sis_factor * 100.0,
                obs.policy.sis_window_days
            );
        }
        Strategy::Tis => {
            let _ = writeln!(
                out,
                "Recommend travel controls that slow the spread of disease into {name}. Choose \
                 one origin state whose arriving travellers are screened for the next {} days; \
                 {:.0}% of exposed and infectious arrivals from that state are quarantined on \
                 arrival.",
                obs.policy.tis_window_days,
                obs.policy.tis_eta * 100.0
            );
        }
    }
    out.push('\n');

    out.push_str("# Inputs:\n");
    let _ = writeln!(
        out,
        "## State-level pandemic statistics (as of {}, cycle {})",
        obs.date, obs.cycle
    );
    let _ = writeln!(
        out,
        "Population composition: Susceptible (S), Exposed (E), Infected (I), Confirmed (Q), \
         Recovered (R), Deaths (D)."
    );
    stats_line(&mut out, &obs.local, true);
    for n in &obs.neighbors {
        stats_line(&mut out, n, false);
    }
    out.push('\n');
    let _ = writeln!(
        out,
        "## Historical inter-state mobility: past {}-day average daily inbound flow into {name}{}",
        obs.history_days,
        if obs.short_history {
            " (short history)"
        } else {
            ""
        }
    );
    for f in &obs.inflows {
        let _ = writeln!(out, "- from {} ({}): {:.1} trips/day", f.name, f.code, f.historical_daily);
    }
    out.push('\n');
    let _ = writeln!(
        out,
        "## Planning-horizon mobility baseline: average daily inbound flow for the upcoming {days} days"
    );
    for f in &obs.inflows {
        let _ = writeln!(
            out,
            "- from {} ({}): {:.1} trips/day, {:.0} trips in total",
            f.name, f.code, f.projected_daily, f.projected_total
        );
    }
    out.push('\n');
    if !messages.is_empty() {
        out.push_str("## Peer messages from other states' policy assistants\n");
        for m in messages {
            let _ = writeln!(out, "- {m}");
        }
        out.push('\n');
    }

    out.push_str("# Constraints:\n");
    let codes: Vec<&str> = obs.inflows.iter().map(|f| f.code.as_str()).collect();
    match strategy {
        Strategy::Tir => {
            let _ = writeln!(
                out,
                "- Output {} fractions for each origin state i, [p_i1, ..., p_i{weeks}], with \
                 sum over m of p_im = 1 and every p_im > 0.",
                number_word(weeks)
            );
            out.push_str("- Inbound flow from origin i in week m = total flow x p_im.\n");
            out.push_str(
                "- A low p_im means strict mobility control in week m; a high p_im means relaxed control.\n",
            );
            let _ = writeln!(out, "- Origin states: {}.", codes.join(", "));
        }
        Strategy::Sis | Strategy::Tis => {
            let _ = writeln!(
                out,
                "- Name exactly one origin state from: {}.",
                codes.join(", ")
            );
        }
    }
    out.push('\n');

    out.push_str("# Final Output:\n");
    out.push_str("Organize your final answer as follows:\n");
    out.push_str("- think_process: a summary of your reasoning in at most 200 words.\n");
    match strategy {
        Strategy::Tir => {
            let ps: Vec<String> = (1..=weeks).map(|m| format!("p_i{m}")).collect();
            let _ = writeln!(
                out,
                "- refined_solution: {{\"state_i\": [{}], ...}} with one entry per origin state, \
                 keyed \"state_\" followed by the state code.",
                ps.join(", ")
            );
        }
        Strategy::Sis | Strategy::Tis => {
            out.push_str("- refined_solution: {\"target_state\": \"<state code>\"}\n");
        }
    }
    out
}
