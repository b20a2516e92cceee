//! Trainable-parameter audits.
//!
//! Every count is computed twice: symbolically from closed forms, and by
//! declaring the real model and summing its trainable tensors. The two must
//! agree site by site.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::adapters::{AdapterConfig, Fusion, Variant};
use crate::error::{Error, Result};
use crate::model::{model_layout, TrainMode, HEAD_PREFIX};
use crate::nn::EncoderConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    pub method: String,
    pub closed_form_count: u64,
    pub introspected_count: u64,
    /// `(site, count)` in layer order, e.g. `("layer3.mhsa", 132032)`.
    pub per_site: Vec<(String, u64)>,
    /// Published count, rounded, in raw parameters.
    pub reference_count: Option<u64>,
}

impl AuditReport {
    pub fn reference_m(&self) -> Option<f64> {
        self.reference_count.map(|c| c as f64 / 1e6)
    }

    /// `|exact - reference| / reference`; zero when both are zero.
    pub fn relative_deviation(&self) -> Option<f64> {
        self.reference_count.map(|r| {
            if r == 0 {
                if self.closed_form_count == 0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                (self.closed_form_count as f64 - r as f64).abs() / r as f64
            }
        })
    }
}

/// Reference budgets in millions, as printed (two decimals).
pub fn reference_millions(variant: Variant) -> f64 {
    match variant {
        Variant::MultiConv => 3.17,
        Variant::Lora => 3.15,
        Variant::Houlsby => 6.44,
        Variant::BitFit => 0.28,
        Variant::Prompt => 0.03,
        Variant::None => 0.0,
    }
}

pub fn method_label(variant: Variant) -> &'static str {
    match variant {
        Variant::MultiConv => "MultiConvAdapter",
        Variant::Lora => "LoRA",
        Variant::Houlsby => "Houlsby",
        Variant::BitFit => "BitFit",
        Variant::Prompt => "Prompt-tuning",
        Variant::None => "Fixed backbone",
    }
}

fn multiconv_site(d: u64, cfg: &AdapterConfig) -> u64 {
    let b = cfg.bottleneck as u64;
    let channels = cfg.branch_channels() as u64;
    let convs: u64 = cfg.kernels.iter().map(|&k| channels * k as u64).sum();
    let fusion = match (cfg.kernels.is_empty(), cfg.fusion) {
        (true, _) => 0,
        (false, Fusion::MixupConv) => 3 * b,
        (false, Fusion::WeightedSum) => cfg.kernels.len() as u64,
        (false, Fusion::Sum | Fusion::Concat) => 0,
    };
    2 * d * b + convs + fusion
}

fn houlsby_site(d: u64, b: u64) -> u64 {
    (d * b + b) + (b * d + d) + 2 * d
}

/// Closed-form trainable count per site.
pub fn closed_form_sites(enc: &EncoderConfig, cfg: &AdapterConfig) -> Vec<(String, u64)> {
    let (d, dff) = (enc.model_dim as u64, enc.inner_dim as u64);
    let mut out = Vec::new();
    let placement = cfg.effective_placement();
    for l in 0..enc.num_layers {
        match cfg.variant {
            Variant::MultiConv | Variant::Houlsby => {
                for site in ["mhsa", "ffn"] {
                    let included = matches!(
                        (placement.name(), site),
                        ("both", _) | ("mhsa", "mhsa") | ("ffn", "ffn")
                    );
                    if !included {
                        continue;
                    }
                    let n = if cfg.variant == Variant::MultiConv {
                        multiconv_site(d, cfg)
                    } else {
                        houlsby_site(d, cfg.bottleneck as u64)
                    };
                    out.push((format!("layer{l}.{site}"), n));
                }
            }
            Variant::Lora => out.push((format!("layer{l}.lora"), 4 * 2 * d * cfg.rank as u64)),
            Variant::BitFit => out.push((format!("layer{l}.bitfit"), 4 * d + dff + d + 2 * d)),
            Variant::Prompt | Variant::None => {}
        }
    }
    if cfg.variant == Variant::Prompt {
        out.push(("prompt".into(), cfg.prompt_tokens as u64 * d));
    }
    out
}

pub fn closed_form(enc: &EncoderConfig, cfg: &AdapterConfig) -> u64 {
    closed_form_sites(enc, cfg).iter().map(|(_, n)| n).sum()
}

fn site_of(name: &str) -> String {
    if name == "prompt" {
        return "prompt".into();
    }
    let parts: Vec<&str> = name.split('.').collect();
    match parts.as_slice() {
        ["layers", l, "adapter", site, ..] => format!("layer{l}.{site}"),
        ["layers", l, "attn", _, leaf] if leaf.starts_with("lora_") => format!("layer{l}.lora"),
        ["layers", l, ..] if name.ends_with(".bias") => format!("layer{l}.bitfit"),
        _ => name.to_string(),
    }
}

/// Trainable counts per site read off the declared model (PEFT mode, head
/// excluded), in declaration order.
pub fn introspect_sites(enc: &EncoderConfig, cfg: &AdapterConfig) -> Result<Vec<(String, u64)>> {
    let (layout, _) = model_layout(enc, cfg, TrainMode::Peft)?;
    let mut order = Vec::<String>::new();
    let mut counts = BTreeMap::<String, u64>::new();
    for spec in layout.specs() {
        if !spec.trainable || spec.name.starts_with(HEAD_PREFIX) {
            continue;
        }
        let site = site_of(&spec.name);
        let slot = counts.entry(site.clone()).or_insert_with(|| {
            order.push(site.clone());
            0
        });
        *slot += spec.numel() as u64;
    }
    Ok(order.into_iter().map(|s| (s.clone(), counts[&s])).collect())
}

pub fn audit(enc: &EncoderConfig, cfg: &AdapterConfig) -> Result<AuditReport> {
    cfg.validate(enc)?;
    let symbolic = closed_form_sites(enc, cfg);
    let observed = introspect_sites(enc, cfg)?;
    let observed_map: BTreeMap<&str, u64> = observed.iter().map(|(s, n)| (s.as_str(), *n)).collect();
    let symbolic_map: BTreeMap<&str, u64> = symbolic.iter().map(|(s, n)| (s.as_str(), *n)).collect();
    for (site, n) in &symbolic {
        let seen = observed_map.get(site.as_str()).copied().unwrap_or(0);
        if seen != *n {
            return Err(Error::AuditMismatch {
                site: site.clone(),
                closed_form: *n,
                introspected: seen,
            });
        }
    }
    if let Some((site, n)) = observed.iter().find(|(s, _)| !symbolic_map.contains_key(s.as_str())) {
        return Err(Error::AuditMismatch {
            site: site.clone(),
            closed_form: 0,
            introspected: *n,
        });
    }
    let closed_form_count = symbolic.iter().map(|(_, n)| n).sum();
    let introspected_count = observed.iter().map(|(_, n)| n).sum();
    Ok(AuditReport {
        method: method_label(cfg.variant).to_string(),
        closed_form_count,
        introspected_count,
        per_site: symbolic,
        reference_count: has_reference(enc, cfg).then(|| (reference_millions(cfg.variant) * 1e6).round() as u64),
    })
}

/// Adapter configuration used for each row of the comparison table.
pub fn table_config(variant: Variant) -> AdapterConfig {
    AdapterConfig::of_variant(variant)
}

/// Whether a published budget exists for this exact configuration.
pub fn has_reference(enc: &EncoderConfig, cfg: &AdapterConfig) -> bool {
    *enc == EncoderConfig::xlsr() && cfg.resolved() == table_config(cfg.variant).resolved()
}

pub fn audit_table(enc: &EncoderConfig, variants: &[Variant]) -> Result<Vec<AuditReport>> {
    variants.iter().map(|&v| audit(enc, &table_config(v))).collect()
}

pub const AUDIT_CSV_HEADER: &str = "method,exact_count,reference_M,rel_dev";

pub fn table_csv(rows: &[AuditReport]) -> String {
    let mut s = String::from(AUDIT_CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = match (r.reference_m(), r.relative_deviation()) {
            (Some(m), Some(d)) => writeln!(s, "{},{},{m:.2},{d:.6}", r.method, r.closed_form_count),
            _ => writeln!(s, "{},{},,", r.method, r.closed_form_count),
        };
    }
    s
}

pub fn group_thousands(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

pub fn table_text(rows: &[AuditReport]) -> String {
    let mut s = format!("{:<18} {:>12} {:>10} {:>9}\n", "method", "exact", "reference", "rel_dev");
    for r in rows {
        let (reference, dev) = match (r.reference_m(), r.relative_deviation()) {
            (Some(m), Some(d)) => (format!("{m:.2}M"), format!("{:.3}%", 100.0 * d)),
            _ => ("-".into(), "-".into()),
        };
        let _ = writeln!(
            s,
            "{:<18} {:>12} {:>10} {:>9}",
            r.method,
            group_thousands(r.closed_form_count),
            reference,
            dev
        );
    }
    s
}
