//! Injection fuzzing of template rendering against the oracle tokenizer.

use gate_core::batch::template::placeholders;
use gate_core::batch::{builtin_adapter_specs, render_template, TemplateError, TemplateVars};
use proptest::prelude::*;
use proptest::strategy::ValueTree;
use proptest::test_runner::TestRunner;

use super::oracle_split;

const HOSTILE: &[&str] = &[
    ";", "&&", "||", "|", "&", "$(id)", "`id`", "${IFS}", "$HOME", ">", ">>", "<", "2>&1", "'", "\"",
    "\\", "\n", "\r\n", "\t", " ", "*", "?", "#", "~", "{", "}", "(", ")", "!", "%0a", "\0",
    "rm -rf /", "; reboot", "' OR '1'='1", "\";id;\"", "\u{037e}", "\u{ff1b}", "\u{2018}", "\u{2019}",
    "\u{201c}", "\u{201d}", "\u{00a0}", "\u{2028}", "\u{2029}", "\u{200b}", "\u{0430}", "\u{ff04}(id)",
    "\u{2044}", "\u{fe68}", "\u{202e}", "＄", "ǀ",
];

/// Hostile strings: whitelisted filler around at least one metacharacter,
/// quote, newline or confusable.
pub fn hostile_strategy() -> impl Strategy<Value = String> {
    let fragment = prop::sample::select(HOSTILE.to_vec());
    let filler = "[A-Za-z0-9._:=/@-]{0,6}";
    (
        filler,
        fragment.clone(),
        prop::collection::vec((fragment, "[A-Za-z0-9._-]{0,4}"), 0..3),
        filler,
    )
        .prop_map(|(head, first, rest, tail)| {
            let mut s = head;
            s.push_str(first);
            for (frag, fill) in rest {
                s.push_str(frag);
                s.push_str(&fill);
            }
            s.push_str(&tail);
            s
        })
}

pub fn hostile_corpus(n: usize) -> Vec<String> {
    let mut runner = TestRunner::deterministic();
    let strategy = hostile_strategy();
    (0..n)
        .map(|_| strategy.new_tree(&mut runner).expect("strategy").current())
        .collect()
}

/// Every template the builtin adapters use, plus a few with placeholders
/// inside quotes and glued to option names.
pub fn fuzz_templates() -> Vec<String> {
    let mut out = Vec::new();
    for spec in builtin_adapter_specs() {
        out.push(spec.submit_command);
        out.push(spec.status_command);
        out.push(spec.cancel_command);
        out.push(spec.job_script);
    }
    out.extend(
        [
            "qsub -l mem={mem} -l nodes=1:ppn={nprocs} -q {queue} -N gw-{username}",
            "sbatch --mem={mem} --time={runtime} -p \"{queue}\" --job-name='gw-{username}'",
            "bsub -M {mem} -W {runtime} -J {username} -o /tmp/{username}.out",
            "qsub -v GATEWAY_URL={gateway_url},PATH_PREFIX={path_prefix} -l host={host}",
        ]
        .map(String::from),
    );
    out
}

fn marker(name: &str) -> String {
    format!("QQ{name}QQ")
}

#[derive(Debug, Default)]
pub struct FuzzReport {
    pub cases: usize,
    pub rejected: usize,
    pub rendered: usize,
    pub escapes: Vec<String>,
}

/// Tokens of each line of `text`, or `None` if the oracle rejects a line.
fn split_lines(text: &str) -> Option<Vec<Vec<String>>> {
    text.split('\n').map(oracle_split).collect()
}

/// Render every hostile value into every placeholder position (cycling
/// through templates) and compare the oracle tokenization of the result
/// with that of the template skeleton.
pub fn run_injection_fuzz(n: usize) -> FuzzReport {
    fuzz(n, false)
}

/// The same corpus with the whitelist bypassed (values set as raw). Used as
/// a control to show the oracle comparison does detect escapes.
pub fn run_unchecked_control(n: usize) -> FuzzReport {
    fuzz(n, true)
}

fn fuzz(n: usize, bypass: bool) -> FuzzReport {
    let templates = fuzz_templates();
    let corpus = hostile_corpus(n);
    let mut slots = Vec::new();
    for t in &templates {
        for name in placeholders(t).expect("valid template") {
            if name != "cmd" {
                slots.push((t.clone(), name));
            }
        }
    }
    let mut report = FuzzReport::default();
    for (i, value) in corpus.iter().enumerate() {
        let (template, target) = &slots[i % slots.len()];
        report.cases += 1;
        let mut skeleton_vars = TemplateVars::new();
        let mut vars = TemplateVars::new();
        for name in placeholders(template).unwrap() {
            if name == "cmd" {
                skeleton_vars.set_raw("cmd", "/opt/gateway/user-server");
                vars.set_raw("cmd", "/opt/gateway/user-server");
            } else {
                skeleton_vars.set(&name, marker(&name));
                if &name == target && bypass {
                    vars.set_raw(&name, value.as_str());
                } else if &name == target {
                    vars.set(&name, value.as_str());
                } else {
                    vars.set(&name, marker(&name));
                }
            }
        }
        let skeleton = render_template(template, &skeleton_vars).expect("skeleton renders");
        match render_template(template, &vars) {
            Err(TemplateError::InjectionRejected { .. }) => report.rejected += 1,
            Err(e) => panic!("unexpected render error {e:?} for {template:?}"),
            Ok(rendered) => {
                report.rendered += 1;
                let expected = split_lines(&skeleton).map(|lines| {
                    lines
                        .into_iter()
                        .map(|toks| toks.into_iter().map(|t| t.replace(&marker(target), value)).collect::<Vec<_>>())
                        .collect::<Vec<_>>()
                });
                if split_lines(&rendered) != expected {
                    report.escapes.push(format!("{template:?} with {target}={value:?}"));
                }
            }
        }
    }
    report
}
