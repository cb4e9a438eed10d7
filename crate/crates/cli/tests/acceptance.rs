//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use crossanno::agreement::pairwise_entity_f1;
use crossanno::evaluation::{evaluate, render_report, ReportFormat};
use crossanno::merge::{merge_pair, Conflict, Resolution};
use crossanno::model::char_len;
use crossanno::predictions::FileProvider;
use crossanno::sampling::{score_uncertainty, select_batch, SamplingConfig, Strategy, UncertaintyMethod, UncertaintyScore};
use crossanno::synth::{self, Rng};
use crossanno::taxonomy::{apply_adjustment, validate_adjustment, ClassAdjustment};
use crossanno::tokenize::{tokenize, Tokenization};
use crossanno::workflow::{AssignmentPlan, PlanOptions};
use crossanno::{jsonl, AnnotationSet, Author, Document, LabelScheme, Project, ProjectStore, Span, Stage, TokenSpan};
use crossanno::predictions::TokenProbabilities;

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Option<Duration>,
    run: fn() -> Result<(), String>,
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ann(doc: &str, who: &str, spans: &[(usize, usize, &str)]) -> AnnotationSet {
    AnnotationSet::new(
        doc,
        Author::annotator(who).unwrap(),
        1,
        spans.iter().map(|&(s, e, l)| Span::new(s, e, l).unwrap()).collect(),
    )
    .unwrap()
}

/// Random non-overlapping spans over `[0, len)`, at most `max` of them.
fn random_spans(rng: &mut Rng, len: usize, max: usize, labels: &[String]) -> Vec<Span> {
    let mut picked: Vec<(usize, usize)> = Vec::new();
    for _ in 0..rng.below(max + 1) {
        let s = rng.below(len);
        let e = s + 1 + rng.below((len - s).min(12));
        if picked.iter().all(|&(a, b)| e <= a || b <= s) {
            picked.push((s, e));
        }
    }
    picked
        .into_iter()
        .map(|(s, e)| Span::new(s, e, rng.pick(labels).as_str()).unwrap())
        .collect()
}

fn random_text(rng: &mut Rng, max_chars: usize) -> String {
    const ALPHABET: [char; 12] = ['a', 'b', 'å', 'ö', 'x', ' ', ' ', ',', '.', '7', 'é', '🚀'];
    let n = 1 + rng.below(max_chars);
    (0..n).map(|_| *rng.pick(&ALPHABET)).collect()
}

// ---------------------------------------------------------------- 1

fn merge_conservation() -> Result<(), String> {
    let labels: Vec<String> = ["A", "B", "C", "D"].map(String::from).to_vec();
    let mut rng = Rng::new(1);
    for case in 0..1000 {
        let len = 1 + rng.below(200);
        let k = 1 + rng.below(4);
        let a = AnnotationSet::new("d", Author::annotator("a").unwrap(), 1, random_spans(&mut rng, len, 6, &labels[..k])).unwrap();
        let mut b_spans = random_spans(&mut rng, len, 6, &labels[..k]);
        // Half the cases share some spans exactly.
        if case % 2 == 0 {
            for s in a.spans() {
                if rng.chance(0.5) && b_spans.iter().all(|t| !t.overlaps(s)) {
                    b_spans.push(s.clone());
                }
            }
        }
        let b = AnnotationSet::new("d", Author::annotator("b").unwrap(), 1, b_spans).unwrap();

        let (m_ab, c_ab) = merge_pair(&a, &b).map_err(|e| e.to_string())?;
        let (m_ba, _) = merge_pair(&b, &a).map_err(|e| e.to_string())?;
        let agreed = |m: &AnnotationSet| -> BTreeSet<(usize, usize, String)> {
            m.spans()
                .iter()
                .filter(|s| !s.is_conflict())
                .map(|s| (s.start(), s.end(), s.label().to_string()))
                .collect()
        };
        ensure(agreed(&m_ab) == agreed(&m_ba), || format!("case {case}: agreed set not symmetric"))?;

        let variants: Vec<&Span> = m_ab.spans().iter().filter(|s| s.is_conflict()).collect();
        let in_conflicts: usize = c_ab.iter().map(|c| c.variants.len()).sum();
        ensure(variants.len() == in_conflicts, || format!("case {case}: variants outside conflicts"))?;
        let n_agreed = agreed(&m_ab).len();
        ensure(2 * n_agreed + variants.len() == a.spans().len() + b.spans().len(), || {
            format!("case {case}: span count not conserved")
        })?;
        for (set, origin) in [(&a, "a"), (&b, "b")] {
            for s in set.spans() {
                let kept = agreed(&m_ab).contains(&(s.start(), s.end(), s.label().to_string()))
                    || variants.iter().any(|v| {
                        v.key() == (s.start(), s.end(), "???")
                            && v.candidate_label() == Some(s.label())
                            && v.origin() == Some(origin)
                    });
                ensure(kept, || format!("case {case}: span {s} of {origin} lost"))?;
            }
        }

        let twin = a.clone().with_author(Author::annotator("b").unwrap()).unwrap();
        let (m_same, c_same) = merge_pair(&a, &twin).map_err(|e| e.to_string())?;
        ensure(c_same.is_empty() && !m_same.has_conflicts(), || format!("case {case}: identical inputs conflict"))?;
        ensure(m_same.spans().len() == a.spans().len(), || format!("case {case}: identical inputs lost spans"))?;
    }
    Ok(())
}

// ---------------------------------------------------------------- 2

fn merge_rules() -> Result<(), String> {
    type Row = (usize, usize, String, Option<String>, Option<String>);
    let show = |m: &AnnotationSet| -> Vec<Row> {
        m.spans()
            .iter()
            .map(|s| {
                (
                    s.start(),
                    s.end(),
                    s.label().to_string(),
                    s.candidate_label().map(str::to_string),
                    s.origin().map(str::to_string),
                )
            })
            .collect()
    };
    let o = |s: &str| Some(s.to_string());

    // A word tagged by one annotator only.
    let (m, c) = merge_pair(&ann("d", "a", &[(0, 6, "SKILL")]), &ann("d", "b", &[])).map_err(|e| e.to_string())?;
    ensure(show(&m) == vec![(0, 6, "???".into(), o("SKILL"), o("a"))], || format!("one-sided: {:?}", show(&m)))?;
    ensure(c.len() == 1 && c[0].conflict_id == "d#0", || "one-sided: conflict list".into())?;

    // Overlapping annotations: both variants kept under ???.
    let (m, c) = merge_pair(&ann("d", "a", &[(0, 10, "JOB_TASK")]), &ann("d", "b", &[(4, 10, "JOB_TASK")]))
        .map_err(|e| e.to_string())?;
    ensure(
        show(&m)
            == vec![
                (0, 10, "???".into(), o("JOB_TASK"), o("a")),
                (4, 10, "???".into(), o("JOB_TASK"), o("b")),
            ],
        || format!("overlap: {:?}", show(&m)),
    )?;
    ensure(c.len() == 1 && c[0].variants.len() == 2, || "overlap: one conflict with two variants".into())?;

    // Coinciding entities are kept as they are.
    let (m, c) = merge_pair(
        &ann("d", "a", &[(0, 4, "SKILL"), (10, 14, "TITLE")]),
        &ann("d", "b", &[(0, 4, "SKILL"), (10, 14, "TITLE")]),
    )
    .map_err(|e| e.to_string())?;
    ensure(
        show(&m) == vec![(0, 4, "SKILL".into(), None, None), (10, 14, "TITLE".into(), None, None)],
        || format!("agreement: {:?}", show(&m)),
    )?;
    ensure(c.is_empty(), || "agreement: no conflicts".into())
}

// ---------------------------------------------------------------- 3

/// Class of each token: the leftmost span overlapping it by a character.
fn oracle_token_classes(tokens: &[TokenSpan], spans: &[Span]) -> Vec<Option<String>> {
    tokens
        .iter()
        .map(|t| {
            let mut sorted: Vec<&Span> = spans.iter().collect();
            sorted.sort_by_key(|s| s.start());
            sorted
                .into_iter()
                .find(|s| s.start() < t.end && t.start < s.end())
                .map(|s| s.label().to_string())
        })
        .collect()
}

fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
    (p, r, f)
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}

fn evaluation_oracle() -> Result<(), String> {
    let scheme = LabelScheme::new(1, ["A", "B", "C"]).unwrap();
    let labels = scheme.labels().to_vec();
    let mut rng = Rng::new(3);
    for case in 0..500 {
        let n_docs = 1 + rng.below(4);
        let mut docs = Vec::new();
        let mut gold = Vec::new();
        let mut pred = Vec::new();
        for d in 0..n_docs {
            let text = random_text(&mut rng, 120);
            let len = char_len(&text);
            let id = format!("doc{d}");
            let g = random_spans(&mut rng, len, 6, &labels);
            let mut p: Vec<Span> = g.iter().filter(|_| rng.chance(0.6)).cloned().collect();
            for s in random_spans(&mut rng, len, 4, &labels) {
                if p.iter().all(|t| !t.overlaps(&s)) {
                    p.push(s);
                }
            }
            gold.push(AnnotationSet::new(id.as_str(), Author::Gold, 1, g).unwrap());
            pred.push(AnnotationSet::new(id.as_str(), Author::annotator("model").unwrap(), 1, p).unwrap());
            docs.push(Document::new(id, text).unwrap());
        }
        let tok = Tokenization::from_documents(&docs);
        let report = evaluate(&gold, &pred, &scheme, &tok).map_err(|e| e.to_string())?;

        let mut ent: BTreeMap<&str, [usize; 3]> = BTreeMap::new();
        let mut tokc: BTreeMap<&str, [usize; 3]> = BTreeMap::new();
        for ((g, p), doc) in gold.iter().zip(&pred).zip(&docs) {
            for l in &labels {
                let key = |s: &Span| (s.start(), s.end());
                let gs: Vec<_> = g.spans().iter().filter(|s| s.label() == l).map(key).collect();
                let ps: Vec<_> = p.spans().iter().filter(|s| s.label() == l).map(key).collect();
                let tp = gs.iter().filter(|x| ps.contains(x)).count();
                let e = ent.entry(l).or_default();
                e[0] += tp;
                e[1] += ps.len() - tp;
                e[2] += gs.len() - tp;
            }
            let tokens = tokenize(doc.text());
            let gc = oracle_token_classes(&tokens, g.spans());
            let pc = oracle_token_classes(&tokens, p.spans());
            for l in &labels {
                let t = tokc.entry(l).or_default();
                for (x, y) in gc.iter().zip(&pc) {
                    let (gx, py) = (x.as_deref() == Some(l), y.as_deref() == Some(l));
                    t[0] += usize::from(gx && py);
                    t[1] += usize::from(py && !gx);
                    t[2] += usize::from(gx && !py);
                }
            }
        }
        let mut micro_e = [0; 3];
        let mut micro_t = [0; 3];
        for l in &labels {
            let (e, t) = (ent[l.as_str()], tokc[l.as_str()]);
            for i in 0..3 {
                micro_e[i] += e[i];
                micro_t[i] += t[i];
            }
            let c = &report.per_class[l.as_str()];
            let (ep, er, ef) = prf(e[0], e[1], e[2]);
            let (tp, tr, tf) = prf(t[0], t[1], t[2]);
            let got = [c.entity_p, c.entity_r, c.entity_f1, c.token_p, c.token_r, c.token_f1];
            let want = [ep, er, ef, tp, tr, tf];
            ensure(got.iter().zip(&want).all(|(a, b)| close(*a, *b)), || {
                format!("case {case} class {l}: {got:?} vs oracle {want:?}")
            })?;
        }
        let (ep, er, ef) = prf(micro_e[0], micro_e[1], micro_e[2]);
        let (tp, tr, tf) = prf(micro_t[0], micro_t[1], micro_t[2]);
        let got = [
            report.micro_entity_p,
            report.micro_entity_r,
            report.micro_entity_f1,
            report.micro_token_p,
            report.micro_token_r,
            report.micro_token_f1,
        ];
        let want = [ep, er, ef, tp, tr, tf];
        ensure(got.iter().zip(&want).all(|(a, b)| close(*a, *b)), || {
            format!("case {case} micro: {got:?} vs oracle {want:?}")
        })?;
    }
    Ok(())
}

// ---------------------------------------------------------------- 4

/// One document of space-separated words `w00 w01 ...`; every word is a token.
struct WordDoc {
    words: usize,
}

impl WordDoc {
    fn text(&self) -> String {
        (0..self.words).map(|i| format!("w{i:02}")).collect::<Vec<_>>().join(" ")
    }

    /// Char span covering words `first..=last`.
    fn span(&self, first: usize, last: usize, label: &str) -> Span {
        Span::new(4 * first, 4 * last + 3, label).unwrap()
    }
}

fn table_snapshot() -> Result<(), String> {
    let scheme = LabelScheme::new(1, ["SKILL_HARD", "JOB_TASK"]).unwrap();
    let doc = WordDoc { words: 90 };
    let mut gold = Vec::new();
    let mut pred = Vec::new();
    let mut w = 0;
    let mut next = |n: usize| {
        let first = w;
        w += n + 1;
        first
    };
    // SKILL_HARD: 10 exact, 3 spurious, 3 missed (single words).
    for _ in 0..10 {
        let i = next(1);
        gold.push(doc.span(i, i, "SKILL_HARD"));
        pred.push(doc.span(i, i, "SKILL_HARD"));
    }
    for _ in 0..3 {
        let i = next(1);
        pred.push(doc.span(i, i, "SKILL_HARD"));
    }
    for _ in 0..3 {
        let i = next(1);
        gold.push(doc.span(i, i, "SKILL_HARD"));
    }
    // JOB_TASK: 8 exact two-word tasks, 4 three-word tasks predicted one word short.
    for _ in 0..8 {
        let i = next(2);
        gold.push(doc.span(i, i + 1, "JOB_TASK"));
        pred.push(doc.span(i, i + 1, "JOB_TASK"));
    }
    for _ in 0..4 {
        let i = next(3);
        gold.push(doc.span(i, i + 2, "JOB_TASK"));
        pred.push(doc.span(i, i + 1, "JOB_TASK"));
    }
    let document = Document::new("ad", doc.text()).unwrap();
    let tok = Tokenization::from_documents([&document]);
    let gold = [AnnotationSet::new("ad", Author::Gold, 1, gold).unwrap()];
    let pred = [AnnotationSet::new("ad", Author::annotator("model").unwrap(), 1, pred).unwrap()];
    let report = evaluate(&gold, &pred, &scheme, &tok).map_err(|e| e.to_string())?;
    let e: [usize; 3] = report.per_class.values().fold([0; 3], |acc, c| {
        [acc[0] + c.entity_counts.tp, acc[1] + c.entity_counts.fp, acc[2] + c.entity_counts.fn_]
    });
    ensure(e == [18, 7, 7], || format!("micro entity counts {e:?}"))?;

    // SKILL_HARD: 10/13 on both levels. JOB_TASK: entity 8/12; tokens
    // tp 24, fn 4 -> 48/52. Micro: entity 18/25; tokens 2*34/(68+3+7).
    let expected = "\
Class          entity   token  support
--------------------------------------
SKILL_HARD       0.77    0.77       13
JOB_TASK         0.67    0.92       12
--------------------------------------
micro-average    0.72    0.87       25
";
    let table = render_report(&report, ReportFormat::Table);
    ensure(table == expected, || format!("table differs:\n{table}"))?;
    let md = render_report(&report, ReportFormat::Markdown);
    ensure(md.contains("| **micro-average** | **0.72** | **0.87** | **25** |"), || {
        format!("markdown footer differs:\n{md}")
    })
}

// ---------------------------------------------------------------- 5

fn boundary_errors() -> Result<(), String> {
    let scheme = LabelScheme::new(1, ["JOB_TASK", "SKILL"]).unwrap();
    let mut rng = Rng::new(5);
    for case in 0..500 {
        let doc = WordDoc { words: 80 };
        let mut gold = Vec::new();
        let mut pred = Vec::new();
        let mut w = 1;
        let mut perturbed = 0;
        while w + 8 < doc.words {
            let len = 1 + rng.below(4);
            let (first, last) = (w, w + len - 1);
            let label = rng.pick(scheme.labels()).clone();
            gold.push(doc.span(first, last, &label));
            // Gaps of two O words on each side leave room for a one-word shift.
            let mut pf = first;
            let mut pl = last;
            if case == 0 || rng.chance(0.6) {
                loop {
                    pf = (first as isize + rng.below(3) as isize - 1) as usize;
                    pl = (last as isize + rng.below(3) as isize - 1) as usize;
                    if pf <= pl && pf <= last && pl >= first && (pf, pl) != (first, last) {
                        break;
                    }
                }
                perturbed += 1;
            }
            pred.push(doc.span(pf, pl, &label));
            w = last + 3;
        }
        if perturbed == 0 {
            continue;
        }
        let document = Document::new("ad", doc.text()).unwrap();
        let tok = Tokenization::from_documents([&document]);
        let g = [AnnotationSet::new("ad", Author::Gold, 1, gold).unwrap()];
        let p = [AnnotationSet::new("ad", Author::annotator("model").unwrap(), 1, pred).unwrap()];
        let r = evaluate(&g, &p, &scheme, &tok).map_err(|e| e.to_string())?;
        ensure(r.micro_token_f1 >= r.micro_entity_f1, || {
            format!("case {case}: token {} < entity {}", r.micro_token_f1, r.micro_entity_f1)
        })?;
        for (label, c) in &r.per_class {
            ensure(c.token_f1 >= c.entity_f1, || {
                format!("case {case} {label}: token {} < entity {}", c.token_f1, c.entity_f1)
            })?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- 6

fn row_probs(rows: Vec<Vec<f64>>) -> TokenProbabilities {
    TokenProbabilities {
        doc_id: "d".into(),
        scheme_version: 1,
        label_order: (0..rows[0].len()).map(|i| format!("t{i}")).collect(),
        tokens: (0..rows.len()).map(|i| TokenSpan::new(i, i + 1)).collect(),
        probs: rows,
    }
}

fn uncertainty_sampling() -> Result<(), String> {
    use UncertaintyMethod::*;
    let score = |rows: Vec<Vec<f64>>, m| score_uncertainty(&row_probs(rows), m).map(|s| s.value).map_err(|e| e.to_string());
    for m in [LeastConfidence, Margin, Entropy] {
        let v = score(vec![vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]], m)?;
        ensure(v.abs() <= 1e-9, || format!("{m:?} one-hot gives {v}"))?;
    }
    let lc = score(vec![vec![0.5, 0.5]], LeastConfidence)?;
    ensure((lc - 0.5).abs() <= 1e-9, || format!("least confidence uniform-2 gives {lc}"))?;
    let m = score(vec![vec![0.5, 0.5]], Margin)?;
    ensure((m - 1.0).abs() <= 1e-9, || format!("margin uniform-2 gives {m}"))?;
    let h = score(vec![vec![0.5, 0.5]], Entropy)?;
    ensure((h - 2f64.ln()).abs() <= 1e-9, || format!("entropy uniform-2 gives {h}"))?;

    let mut rng = Rng::new(6);
    for case in 0..200 {
        let n = 1 + rng.below(40);
        let scores: Vec<UncertaintyScore> = (0..n)
            .map(|i| UncertaintyScore {
                doc_id: format!("doc{:03}", rng.below(1000) * 100 + i),
                // A coarse grid makes ties common.
                value: if rng.chance(0.3) { (rng.below(4) as f64) / 4.0 } else { rng.unit() },
            })
            .collect();
        let k = 1 + rng.below(n);
        let got = select_batch(&scores, k).map_err(|e| e.to_string())?;

        // Top-k by descending score, ties broken by ascending id.
        let mut ranked: Vec<&UncertaintyScore> = scores.iter().collect();
        ranked.sort_by(|a, b| b.value.partial_cmp(&a.value).unwrap().then_with(|| a.doc_id.cmp(&b.doc_id)));
        let want: Vec<String> = ranked[..k].iter().map(|s| s.doc_id.clone()).collect();
        ensure(got == want, || format!("case {case}: top-{k} {got:?} vs {want:?}"))?;

        let c = 0.001 + 1000.0 * rng.unit();
        let scaled: Vec<UncertaintyScore> = scores
            .iter()
            .map(|s| UncertaintyScore { doc_id: s.doc_id.clone(), value: s.value * c })
            .collect();
        let again = select_batch(&scaled, k).map_err(|e| e.to_string())?;
        let as_set = |v: &[String]| v.iter().cloned().collect::<BTreeSet<_>>();
        ensure(as_set(&again) == as_set(&got), || format!("case {case}: scaling by {c} changed the batch"))?;
    }
    Ok(())
}

// ---------------------------------------------------------------- 7

fn random_adjustment(rng: &mut Rng, scheme: &LabelScheme, pool: &[&str]) -> ClassAdjustment {
    let mut targets: Vec<&str> = pool.iter().copied().filter(|_| rng.chance(0.6)).collect();
    if targets.is_empty() {
        targets.push(pool[0]);
    }
    let mut mapping: BTreeMap<String, String> = BTreeMap::new();
    for (i, l) in scheme.labels().iter().enumerate() {
        // Keep at least one class alive.
        let t = if i == 0 { *rng.pick(&targets) } else if rng.chance(0.2) { "O" } else { *rng.pick(&targets) };
        mapping.insert(l.clone(), t.to_string());
    }
    ClassAdjustment::new(scheme.version(), mapping, "random")
}

fn class_adjustment() -> Result<(), String> {
    // 16 -> 10 on synthetic gold data.
    let old = synth::scheme16();
    let adj = synth::adjustment16to10("merge rare classes");
    let new = validate_adjustment(&old, &adj).map_err(|e| e.to_string())?;
    ensure(new.labels().len() == 10, || format!("{} labels after adjustment", new.labels().len()))?;
    let data: Vec<AnnotationSet> = synth::corpus(60, &old, 7)
        .into_iter()
        .map(|d| AnnotationSet::new(d.document.id(), Author::Gold, 1, d.spans).unwrap())
        .collect();
    let retired: BTreeSet<&str> = old.labels().iter().map(String::as_str).filter(|l| !new.contains(l)).collect();
    ensure(data.iter().flat_map(|s| s.spans()).any(|s| retired.contains(s.label())), || {
        "fixture has no retired labels".into()
    })?;
    let mapped = apply_adjustment(&data, &adj).map_err(|e| e.to_string())?;
    let leftovers = mapped.iter().flat_map(|s| s.spans()).filter(|s| !new.contains(s.label())).count();
    ensure(leftovers == 0, || format!("{leftovers} spans keep old-only labels"))?;

    // Composition equals sequential application.
    let pool = ["P", "Q", "R", "S", "T", "U"];
    let mut rng = Rng::new(7);
    for case in 0..200 {
        let k = 2 + rng.below(5);
        let s1 = LabelScheme::new(1, pool[..k].iter().copied()).unwrap();
        let first = random_adjustment(&mut rng, &s1, &["P", "Q", "R", "X", "Y"]);
        let s2 = validate_adjustment(&s1, &first).map_err(|e| format!("case {case}: {e}"))?;
        let second = random_adjustment(&mut rng, &s2, &["M", "N", "P"]);
        validate_adjustment(&s2, &second).map_err(|e| format!("case {case}: {e}"))?;
        let both = first.compose(&second).map_err(|e| format!("case {case}: {e}"))?;

        let sets: Vec<AnnotationSet> = (0..3)
            .map(|d| {
                let text = random_text(&mut rng, 80);
                let spans = random_spans(&mut rng, char_len(&text), 6, s1.labels());
                AnnotationSet::new(format!("d{d}"), Author::Gold, 1, spans).unwrap()
            })
            .collect();
        let stepwise = apply_adjustment(&apply_adjustment(&sets, &first).unwrap(), &second).unwrap();
        let direct = apply_adjustment(&sets, &both).unwrap();
        let spans = |v: &[AnnotationSet]| v.iter().map(|s| s.spans().to_vec()).collect::<Vec<_>>();
        ensure(spans(&stepwise) == spans(&direct), || format!("case {case}: composition differs"))?;
        ensure(both.mapping.keys().eq(s1.labels().iter().collect::<BTreeSet<_>>()), || {
            format!("case {case}: composed mapping domain")
        })?;
    }

    // One audit entry per adjustment.
    let docs = synth::corpus(8, &old, 9);
    let mut project = Project::create(
        "adjust",
        docs.iter().map(|d| d.document.clone()).collect(),
        old.clone(),
        vec!["a".into(), "b".into()],
    )
    .map_err(|e| e.to_string())?;
    project.plan_iteration(SamplingConfig::random(8, 1), None, PlanOptions::default()).map_err(|e| e.to_string())?;
    let sets = docs
        .iter()
        .flat_map(|d| {
            ["a", "b"].map(|w| AnnotationSet::new(d.document.id(), Author::annotator(w).unwrap(), 1, d.spans.clone()).unwrap())
        })
        .collect();
    project.ingest_individual_annotations(1, sets).map_err(|e| e.to_string())?;
    project.merge_iteration(1).map_err(|e| e.to_string())?;
    project.finalize_iteration(1, vec![]).map_err(|e| e.to_string())?;
    let before = project.audit_log().len();
    project.apply_class_adjustment(adj).map_err(|e| e.to_string())?;
    ensure(project.audit_log().len() == before + 1, || "first adjustment audit count".into())?;
    let mut drop_one: BTreeMap<String, String> = new.labels().iter().map(|l| (l.clone(), l.clone())).collect();
    drop_one.insert("JOB_TIME".into(), "O".into());
    project
        .apply_class_adjustment(ClassAdjustment::new(2, drop_one, "drop JOB_TIME"))
        .map_err(|e| e.to_string())?;
    ensure(project.audit_log().len() == before + 2, || "second adjustment audit count".into())?;
    let gold_labels: BTreeSet<&str> = project.gold_sets().iter().flat_map(|s| s.spans()).map(|s| s.label()).collect();
    ensure(gold_labels.iter().all(|l| project.scheme().contains(l)), || format!("gold keeps {gold_labels:?}"))
}

// ---------------------------------------------------------------- 8

fn assignment_topology() -> Result<(), String> {
    for n in 2..=10 {
        let annotators: Vec<String> = (0..n).map(|i| format!("ann{i:02}")).collect();
        for k in n..=10 * n {
            let docs: Vec<String> = (0..k).map(|i| format!("doc{i:04}")).collect();
            let plan = AssignmentPlan::cyclic(&docs, &annotators, k);
            let ctx = |m: String| format!("N={n} k={k}: {m}");

            let mut seen: Vec<&String> = plan.parts.iter().flat_map(|p| &p.doc_ids).collect();
            seen.sort();
            ensure(seen == docs.iter().collect::<Vec<_>>(), || ctx("parts do not partition the batch".into()))?;
            let sizes: Vec<usize> = plan.parts.iter().map(|p| p.doc_ids.len()).collect();
            let spread = sizes.iter().max().unwrap() - sizes.iter().min().unwrap();
            ensure(spread <= 1, || ctx(format!("part sizes {sizes:?}")))?;

            let mut per_part: BTreeMap<usize, BTreeSet<&str>> = BTreeMap::new();
            let mut per_annotator: BTreeMap<&str, usize> = BTreeMap::new();
            for d in &plan.duties {
                per_part.entry(d.part_index).or_default().insert(&d.annotator);
                *per_annotator.entry(&d.annotator).or_default() += 1;
            }
            ensure(plan.duties.len() == 2 * plan.parts.len(), || ctx("duplicate duties".into()))?;
            ensure(per_part.len() == plan.parts.len() && per_part.values().all(|s| s.len() == 2), || {
                ctx(format!("{per_part:?}"))
            })?;
            ensure(per_annotator.len() == n && per_annotator.values().all(|&c| c == 2), || {
                ctx(format!("{per_annotator:?}"))
            })?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- 9

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn scripted(conflicts: &[Conflict]) -> Vec<Resolution> {
    conflicts
        .iter()
        .enumerate()
        .map(|(i, c)| match i % 4 {
            0 => Resolution::accept(&c.conflict_id, 0, "session"),
            1 => Resolution::relabel(&c.conflict_id, Some(c.variants.len() - 1), "TITLE", "session"),
            2 => Resolution::drop(&c.conflict_id, "session"),
            _ => {
                let v = &c.variants[0];
                Resolution::reshape(&c.conflict_id, v.start(), v.end(), "SKILL", "session")
            }
        })
        .collect()
}

fn end_to_end() -> Result<(), String> {
    let e = |e: crossanno::Error| e.to_string();
    let scheme = LabelScheme::new(1, ["SKILL", "TITLE", "PLACE"]).unwrap();
    let docs = synth::corpus(20, &scheme, 99);
    let dir = tempfile::tempdir().unwrap();
    let preds: Vec<TokenProbabilities> = docs
        .iter()
        .enumerate()
        .map(|(i, d)| synth::predictions(&d.document, &d.spans, &scheme, 0.55 + 0.02 * i as f64))
        .collect();
    let pred_path = dir.path().join("predictions.jsonl");
    jsonl::write(&pred_path, &preds).map_err(e)?;
    let provider = FileProvider::new("kb-model", &pred_path);

    let mut project = Project::create(
        "e2e",
        docs.iter().map(|d| d.document.clone()).collect(),
        scheme.clone(),
        vec!["anna".into(), "bertil".into()],
    )
    .map_err(e)?;
    let config = SamplingConfig {
        strategy: Strategy::Entropy,
        batch_size: 20,
        seed: 3,
    };
    let it = project.plan_iteration(config, Some(&provider), PlanOptions::default()).map_err(e)?;
    ensure(it.stage == Stage::Assigned && it.bootstrap.is_some(), || format!("planned stage {}", it.stage))?;
    ensure(project.drafts(1).map_err(e)?.len() == 20, || "drafts missing".into())?;

    let mut rng = Rng::new(12);
    let mut sets = Vec::new();
    for d in &docs {
        for who in ["anna", "bertil"] {
            sets.push(synth::annotate(d, who, &scheme, 0.35, &mut rng));
        }
    }
    project.ingest_individual_annotations(1, sets).map_err(e)?;
    let summary = project.merge_iteration(1).map_err(e)?;
    ensure(summary.conflicts > 0, || "seeded disagreements produced no conflicts".into())?;
    let agreement = project.iteration_agreement(1).map_err(e)?;
    let direct = pairwise_entity_f1(
        &project.individual(1, "anna").map_err(e)?.into_iter().cloned().collect::<Vec<_>>(),
        &project.individual(1, "bertil").map_err(e)?.into_iter().cloned().collect::<Vec<_>>(),
    )
    .map_err(e)?;
    ensure((agreement.pooled.entity_f1 - direct).abs() < 1e-12, || "pooled agreement mismatch".into())?;

    let conflicts = project.conflicts(1).map_err(e)?.to_vec();
    for r in scripted(&conflicts) {
        project.record_resolution(1, r).map_err(e)?;
    }
    project.finalize_iteration(1, vec![]).map_err(e)?;
    ensure(project.iteration(1).map_err(e)?.stage == Stage::Finalized, || "not finalized".into())?;
    for g in project.gold_sets() {
        ensure(!g.has_conflicts(), || format!("{} keeps ??? spans", g.doc_id()))?;
        for w in g.spans().windows(2) {
            ensure(w[0].end() <= w[1].start(), || format!("{} has overlapping gold spans", g.doc_id()))?;
        }
    }

    let split = project.split_dataset(14, 3, 3, 2024, false).map_err(e)?.clone();
    let parts = [&split.train, &split.val, &split.test];
    ensure(parts.map(|p| p.len()) == [14, 3, 3], || "split sizes".into())?;
    let union: BTreeSet<&String> = parts.iter().flat_map(|p| p.iter()).collect();
    let gold_ids: BTreeSet<String> = project.labeled_pool().into_iter().collect();
    ensure(union.len() == 20, || "split not disjoint".into())?;
    ensure(union.into_iter().cloned().collect::<BTreeSet<_>>() == gold_ids, || "split not exhaustive".into())?;

    let first = dir.path().join("first");
    let second = dir.path().join("second");
    ProjectStore::new(&first).save(&project).map_err(e)?;
    let loaded = ProjectStore::new(&first).load().map_err(e)?;
    ProjectStore::new(&second).save(&loaded).map_err(e)?;
    ensure(tree(&first) == tree(&second), || "save -> load -> save is not byte-identical".into())
}

// ---------------------------------------------------------------- 10

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn crossanno(project: &Path, args: &[&str]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_crossanno"))
        .arg("--project")
        .arg(project)
        .args(args)
        .output()
        .expect("binary runs");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn http_get(addr: &str, path: &str) -> Result<String, String> {
    let mut stream = TcpStream::connect(addr).map_err(|e| e.to_string())?;
    stream.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
    write!(stream, "GET {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n").map_err(|e| e.to_string())?;
    let mut response = String::new();
    stream.read_to_string(&mut response).map_err(|e| e.to_string())?;
    Ok(response)
}

fn serve_check(project: &Path) -> Result<(), String> {
    let mut child = Command::new(env!("CARGO_BIN_EXE_crossanno"))
        .arg("--project")
        .arg(project)
        .args(["serve", "--bind", "127.0.0.1:0"])
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| e.to_string())?;
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).map_err(|e| e.to_string())?;
    let addr = line.trim().strip_prefix("listening on http://").ok_or_else(|| format!("serve printed {line:?}"))?.to_string();
    let probe = http_get(&addr, "/api/iterations/1/conflicts?status=open");
    let _ = Command::new("kill").args(["-INT", &child.id().to_string()]).status();
    let status = child.wait().map_err(|e| e.to_string())?;
    let body = probe?;
    ensure(body.starts_with("HTTP/1.1 200"), || format!("conflicts endpoint: {}", body.lines().next().unwrap_or("")))?;
    ensure(body.contains("\"conflict_id\""), || "conflicts endpoint returned no conflicts".into())?;
    ensure(status.code() == Some(0), || format!("serve exited with {status}"))
}

fn cli_contract() -> Result<(), String> {
    let tmp = tempfile::tempdir().unwrap();
    let project = tmp.path().join("project");
    let f = |name: &str| fixtures().join(name).display().to_string();
    let tasks = tmp.path().join("tasks").display().to_string();
    let (corpus, predictions, anna, bertil) = (f("corpus.jsonl"), f("predictions.jsonl"), f("anna.jsonl"), f("bertil.jsonl"));
    let (resolutions, model, mapping) = (f("resolutions.jsonl"), f("model.jsonl"), f("mapping.json"));

    let steps: Vec<(&str, Vec<&str>)> = vec![
        ("init", vec!["init", "--name", "fixture", "--corpus", &corpus, "--labels", "SKILL,TITLE,PLACE", "--annotators", "anna,bertil"]),
        ("sample", vec!["sample", "--strategy", "least_confidence", "--batch-size", "20", "--seed", "1", "--predictions", &predictions]),
        ("bootstrap", vec!["bootstrap", "--predictions", &predictions, "--min-confidence", "0.6"]),
        ("assign", vec!["assign", "--export", &tasks]),
        ("import", vec!["import", &anna, &bertil]),
        ("merge", vec!["merge"]),
        ("agreement", vec!["agreement"]),
    ];
    let mut ran = Vec::new();
    for (name, args) in &steps {
        let r = crossanno(&project, args);
        ensure(r.code == 0, || format!("{name} exited {}: {}", r.code, r.stderr.trim()))?;
        ran.push(*name);
    }
    serve_check(&project)?;
    ran.push("serve");
    let later: Vec<(&str, Vec<&str>)> = vec![
        ("finalize", vec!["finalize", "--resolutions", &resolutions]),
        ("split", vec!["split", "--train", "14", "--val", "3", "--test", "3", "--seed", "7"]),
        ("evaluate", vec!["--format", "markdown", "evaluate", "--predictions", &model]),
        ("remap", vec!["remap", "--mapping", &mapping, "--rationale", "fold titles into roles"]),
        ("status", vec!["--format", "json", "status"]),
    ];
    for (name, args) in &later {
        let r = crossanno(&project, args);
        ensure(r.code == 0, || format!("{name} exited {}: {}", r.code, r.stderr.trim()))?;
        ran.push(*name);
    }
    let status: serde_json::Value = serde_json::from_str(&crossanno(&project, &["--format", "json", "status"]).stdout)
        .map_err(|e| e.to_string())?;
    ensure(status["iterations"][0]["stage"] == "finalized", || format!("status: {status}"))?;
    ensure(ran.len() == 13, || format!("ran {ran:?}"))?;

    let failures: [(&str, &Path, Vec<&str>, i32); 6] = [
        ("validation: zero batch", &project, vec!["sample", "--batch-size", "0"], 1),
        ("validation: bad argument", &project, vec!["split", "--train", "many"], 1),
        ("state: merge twice", &project, vec!["merge"], 2),
        ("state: pool exhausted", &project, vec!["sample", "--batch-size", "10"], 2),
        ("io: missing project", tmp.path(), vec!["status"], 3),
        ("io: missing predictions", &project, vec!["sample", "--strategy", "entropy", "--batch-size", "2", "--predictions", "/nonexistent.jsonl"], 3),
    ];
    for (what, dir, args, want) in failures {
        let r = crossanno(dir, &args);
        ensure(r.code == want, || format!("{what}: exit {} (wanted {want}): {}", r.code, r.stderr.trim()))?;
        let lines: Vec<&str> = r.stderr.lines().filter(|l| !l.trim().is_empty()).collect();
        ensure(lines.len() == 1, || format!("{what}: stderr has {} lines: {:?}", lines.len(), r.stderr))?;
    }
    Ok(())
}

fn main() {
    let criteria = [
        Criterion { id: 1, name: "merge conservation and symmetry", limit: Some(Duration::from_secs(10)), run: merge_conservation },
        Criterion { id: 2, name: "merge rule fixtures", limit: None, run: merge_rules },
        Criterion { id: 3, name: "evaluation oracle equivalence", limit: Some(Duration::from_secs(30)), run: evaluation_oracle },
        Criterion { id: 4, name: "report table snapshot", limit: None, run: table_snapshot },
        Criterion { id: 5, name: "boundary errors favour token F1", limit: None, run: boundary_errors },
        Criterion { id: 6, name: "uncertainty sampling", limit: None, run: uncertainty_sampling },
        Criterion { id: 7, name: "class adjustment", limit: None, run: class_adjustment },
        Criterion { id: 8, name: "assignment topology", limit: None, run: assignment_topology },
        Criterion { id: 9, name: "end-to-end pipeline", limit: Some(Duration::from_secs(5)), run: end_to_end },
        Criterion { id: 10, name: "CLI contract", limit: None, run: cli_contract },
    ];
    let filter: Option<u32> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for c in criteria.iter().filter(|c| filter.is_none_or(|f| f == c.id)) {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let outcome = outcome.and_then(|()| match c.limit {
            Some(limit) if elapsed > limit => Err(format!("took {elapsed:.2?}, limit {limit:?}")),
            _ => Ok(()),
        });
        match outcome {
            Ok(()) => println!("PASS {:>2} {} ({elapsed:.2?})", c.id, c.name),
            Err(msg) => {
                failed += 1;
                println!("FAIL {:>2} {} ({elapsed:.2?}): {msg}", c.id, c.name);
            }
        }
    }
    let _ = std::io::stdout().flush();
    if failed > 0 {
        std::process::exit(1);
    }
}
