//! Role prompt templates and the 96-element strategy prompt space.
//!
//! Templates are plain UTF-8 files with `{{name}}` placeholders. The crate
//! ships a default set (embedded from `templates/`) and can load a directory
//! with the same layout to swap variants without recompiling.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::catalog::{Product, PublicProduct};
use crate::money::Money;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("missing value for placeholder {0:?}")]
    MissingPlaceholder(String),
    #[error("unterminated placeholder at byte {0}")]
    Unterminated(usize),
    #[error("template file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("strategy axes file: {0}")]
    Axes(#[from] serde_json::Error),
    #[error("unknown role {0:?}")]
    UnknownRole(String),
    #[error("action index {0} out of range (0..{ACTION_COUNT})")]
    ActionOutOfRange(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    BuyerSystem,
    SellerSystem,
    BuyerGreeting,
    Judge,
    Analyst,
}

impl Role {
    pub const ALL: [Role; 5] = [
        Role::BuyerSystem,
        Role::SellerSystem,
        Role::BuyerGreeting,
        Role::Judge,
        Role::Analyst,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::BuyerSystem => "buyer_system",
            Role::SellerSystem => "seller_system",
            Role::BuyerGreeting => "buyer_greeting",
            Role::Judge => "judge",
            Role::Analyst => "analyst",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.txt", self.as_str())
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = PromptError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Role::ALL
            .into_iter()
            .find(|r| r.as_str() == s.trim())
            .ok_or_else(|| PromptError::UnknownRole(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub role: Role,
    pub body: String,
}

pub type Context = BTreeMap<String, String>;

impl PromptTemplate {
    pub fn new(role: Role, body: impl Into<String>) -> Self {
        PromptTemplate {
            role,
            body: body.into(),
        }
    }

    /// Placeholder names in order of first appearance.
    pub fn placeholders(&self) -> Result<Vec<String>, PromptError> {
        let mut out = Vec::new();
        scan(&self.body, |name| {
            if !out.iter().any(|n| n == name) {
                out.push(name.to_string());
            }
            Ok(String::new())
        })?;
        Ok(out)
    }

    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.body.as_bytes()))
    }
}

fn scan(
    body: &str,
    mut f: impl FnMut(&str) -> Result<String, PromptError>,
) -> Result<String, PromptError> {
    let mut out = String::with_capacity(body.len());
    let mut rest = body;
    let mut offset = 0;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after
            .find("}}")
            .ok_or(PromptError::Unterminated(offset + start))?;
        out.push_str(&f(after[..end].trim())?);
        let consumed = start + 2 + end + 2;
        offset += consumed;
        rest = &rest[consumed..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Substitute every `{{name}}` in `template` from `context`.
pub fn render(template: &PromptTemplate, context: &Context) -> Result<String, PromptError> {
    scan(&template.body, |name| {
        context
            .get(name)
            .cloned()
            .ok_or_else(|| PromptError::MissingPlaceholder(name.to_string()))
    })
}

/// Product block visible to the buyer: no wholesale price.
pub fn buyer_product_info(p: &PublicProduct) -> String {
    format!(
        "- Product Name: {}\n- Retail Price: {}\n- Features: {}",
        p.name,
        p.retail_price.usd(),
        p.features
    )
}

/// Product block visible to the seller, wholesale price included.
pub fn seller_product_info(p: &Product) -> String {
    format!(
        "- Product Name: {}\n- Retail Price: {}\n- Wholesale Price: {}\n- Features: {}",
        p.name,
        p.retail_price.usd(),
        p.wholesale_price.usd(),
        p.features
    )
}

pub fn buyer_context(p: &PublicProduct, budget: Money) -> Context {
    Context::from([
        ("product_info".into(), buyer_product_info(p)),
        ("budget".into(), budget.to_string()),
    ])
}

pub fn greeting_context(p: &PublicProduct, budget: Option<Money>) -> Context {
    Context::from([
        ("product_name".into(), p.name.clone()),
        ("retail_price".into(), p.retail_price.usd()),
        ("features".into(), p.features.clone()),
        (
            "budget_line".into(),
            budget
                .map(|b| format!("Your maximum budget for this purchase is {}.", b.usd()))
                .unwrap_or_default(),
        ),
    ])
}

pub fn seller_context(p: &Product) -> Context {
    Context::from([("product_info".into(), seller_product_info(p))])
}

pub const NO_RESPONSE_YET: &str = "No response yet";

pub fn judge_context(buyer_message: &str, seller_message: Option<&str>) -> Context {
    Context::from([
        ("latest_buyer_message".into(), buyer_message.to_string()),
        (
            "latest_seller_message".into(),
            seller_message.unwrap_or(NO_RESPONSE_YET).to_string(),
        ),
    ])
}

pub fn analyst_context(seller_message: &str) -> Context {
    Context::from([("seller_message".into(), seller_message.to_string())])
}

// ---------------------------------------------------------------------------
// Strategy action space

pub const ACTION_COUNT: usize = 96;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetEmphasis {
    Hard,
    MediumHard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriceIncreasePolicy {
    EndNow,
    WarnThenEnd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProgressThreshold {
    Tiny,
    Small,
}

impl ProgressThreshold {
    pub fn ratio(self) -> f64 {
        match self {
            ProgressThreshold::Tiny => 0.003,
            ProgressThreshold::Small => 0.008,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConcessionStyle {
    None,
    TinySteps,
}

pub const EXIT_TURNS: [u8; 3] = [2, 3, 4];

/// One strategy prompt configuration. Refusal tone (polite), brevity (short)
/// and the self-check clause (strict) are fixed for every action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StrategyAction {
    pub budget_emphasis: BudgetEmphasis,
    pub price_increase_policy: PriceIncreasePolicy,
    pub exit_turns: u8,
    pub progress_threshold: ProgressThreshold,
    pub concession_style: ConcessionStyle,
    pub non_price_ask: bool,
}

impl StrategyAction {
    /// Mixed-radix index, budget emphasis most significant.
    pub fn index(&self) -> usize {
        let be = self.budget_emphasis as usize;
        let pip = self.price_increase_policy as usize;
        let et = EXIT_TURNS
            .iter()
            .position(|t| *t == self.exit_turns)
            .expect("exit_turns must be one of 2, 3, 4");
        let pt = self.progress_threshold as usize;
        let cs = self.concession_style as usize;
        let np = self.non_price_ask as usize;
        ((((be * 2 + pip) * 3 + et) * 2 + pt) * 2 + cs) * 2 + np
    }

    pub fn from_index(index: usize) -> Result<Self, PromptError> {
        if index >= ACTION_COUNT {
            return Err(PromptError::ActionOutOfRange(index));
        }
        let mut i = index;
        let np = i % 2;
        i /= 2;
        let cs = i % 2;
        i /= 2;
        let pt = i % 2;
        i /= 2;
        let et = i % 3;
        i /= 3;
        let pip = i % 2;
        i /= 2;
        let be = i;
        Ok(StrategyAction {
            budget_emphasis: [BudgetEmphasis::Hard, BudgetEmphasis::MediumHard][be],
            price_increase_policy: [PriceIncreasePolicy::EndNow, PriceIncreasePolicy::WarnThenEnd]
                [pip],
            exit_turns: EXIT_TURNS[et],
            progress_threshold: [ProgressThreshold::Tiny, ProgressThreshold::Small][pt],
            concession_style: [ConcessionStyle::None, ConcessionStyle::TinySteps][cs],
            non_price_ask: np == 1,
        })
    }
}

/// All 96 actions in lexicographic axis order; position equals `index()`.
pub fn enumerate_actions() -> Vec<StrategyAction> {
    (0..ACTION_COUNT)
        .map(|i| StrategyAction::from_index(i).expect("in range"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedDirectives {
    pub refusal_tone: String,
    pub brevity: String,
    pub self_check_clause: String,
}

/// Directive wording per axis value, loaded from `strategy_axes.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyAxes {
    pub version: u32,
    pub header: String,
    pub budget_emphasis: BTreeMap<String, String>,
    pub price_increase_policy: BTreeMap<String, String>,
    /// Contains a `{{n}}` placeholder.
    pub exit_turns: String,
    pub progress_threshold: BTreeMap<String, String>,
    pub concession_style: BTreeMap<String, String>,
    pub non_price_ask: BTreeMap<String, String>,
    pub fixed: FixedDirectives,
}

fn axis_key<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

impl StrategyAxes {
    pub fn from_json(text: &str) -> Result<Self, PromptError> {
        Ok(serde_json::from_str(text)?)
    }

    /// Directive lines for an action: six variable axes, then the fixed ones.
    pub fn directives(&self, a: &StrategyAction) -> Vec<String> {
        let pick = |m: &BTreeMap<String, String>, key: String| {
            m.get(&key)
                .cloned()
                .unwrap_or_else(|| panic!("strategy axes file lacks wording for {key:?}"))
        };
        vec![
            pick(&self.budget_emphasis, axis_key(&a.budget_emphasis)),
            pick(&self.price_increase_policy, axis_key(&a.price_increase_policy)),
            self.exit_turns.replace("{{n}}", &a.exit_turns.to_string()),
            pick(&self.progress_threshold, axis_key(&a.progress_threshold)),
            pick(&self.concession_style, axis_key(&a.concession_style)),
            pick(&self.non_price_ask, a.non_price_ask.to_string()),
            self.fixed.refusal_tone.clone(),
            self.fixed.brevity.clone(),
            self.fixed.self_check_clause.clone(),
        ]
    }
}

/// Buyer system template body extended with the action's strategy block.
/// Placeholders of `base` are left in place for a later `render`.
pub fn render_strategy_prompt(
    base: &PromptTemplate,
    action: &StrategyAction,
    axes: &StrategyAxes,
) -> String {
    debug_assert_eq!(base.role, Role::BuyerSystem);
    let mut out = base.body.trim_end().to_string();
    out.push_str("\n\n");
    out.push_str(&axes.header);
    for line in axes.directives(action) {
        out.push('\n');
        out.push_str(&line);
    }
    out
}

// ---------------------------------------------------------------------------
// Template sets

pub const WHOLESALE_ESTIMATION: &str = include_str!("../templates/wholesale_estimation.txt");
const AXES_FILE: &str = "strategy_axes.json";

#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<Role, PromptTemplate>,
    pub axes: StrategyAxes,
}

fn body(text: &str) -> String {
    text.trim_end_matches(['\n', '\r']).to_string()
}

impl Default for TemplateSet {
    fn default() -> Self {
        let raw = [
            (Role::BuyerSystem, include_str!("../templates/buyer_system.txt")),
            (Role::SellerSystem, include_str!("../templates/seller_system.txt")),
            (Role::BuyerGreeting, include_str!("../templates/buyer_greeting.txt")),
            (Role::Judge, include_str!("../templates/judge.txt")),
            (Role::Analyst, include_str!("../templates/analyst.txt")),
        ];
        TemplateSet {
            templates: raw
                .into_iter()
                .map(|(r, t)| (r, PromptTemplate::new(r, body(t))))
                .collect(),
            axes: StrategyAxes::from_json(include_str!("../templates/strategy_axes.json"))
                .expect("embedded strategy axes are valid"),
        }
    }
}

impl TemplateSet {
    /// Load `<role>.txt` for each role plus `strategy_axes.json` from `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self, PromptError> {
        let read = |name: &str| {
            let path = dir.join(name);
            std::fs::read_to_string(&path).map_err(|source| PromptError::Io {
                path: path.display().to_string(),
                source,
            })
        };
        let mut templates = BTreeMap::new();
        for role in Role::ALL {
            templates.insert(role, PromptTemplate::new(role, body(&read(&role.file_name())?)));
        }
        let axes = StrategyAxes::from_json(&read(AXES_FILE)?)?;
        Ok(TemplateSet { templates, axes })
    }

    pub fn get(&self, role: Role) -> &PromptTemplate {
        &self.templates[&role]
    }

    pub fn strategy_prompt(&self, action: &StrategyAction) -> PromptTemplate {
        PromptTemplate::new(
            Role::BuyerSystem,
            render_strategy_prompt(self.get(Role::BuyerSystem), action, &self.axes),
        )
    }

    /// Content hashes keyed by file name, for run manifests.
    pub fn hashes(&self) -> BTreeMap<String, String> {
        let mut out: BTreeMap<String, String> = self
            .templates
            .values()
            .map(|t| (t.role.file_name(), t.sha256()))
            .collect();
        let axes = serde_json::to_string(&self.axes).expect("serializable");
        out.insert(AXES_FILE.into(), hex::encode(Sha256::digest(axes.as_bytes())));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{camry, derive_budget, BudgetLevel};
    use std::collections::HashSet;

    #[test]
    fn judge_without_seller_message_uses_fallback() {
        let set = TemplateSet::default();
        let text = render(set.get(Role::Judge), &judge_context("I accept", None)).unwrap();
        assert!(text.contains("Buyer's latest message: \"I accept\""));
        assert!(text.contains("Seller's latest message: \"No response yet\""));
        assert!(text.ends_with("ACCEPTANCE, REJECTION, or CONTINUE"));
    }

    #[test]
    fn buyer_budget_is_two_decimals() {
        let set = TemplateSet::default();
        let text = render(
            set.get(Role::BuyerSystem),
            &buyer_context(&(&camry()).into(), Money::from_dollars(32394)),
        )
        .unwrap();
        assert!(text.contains("maximum budget of $32394.00 for this purchase"));
        assert!(!text.contains("{{"));
    }

    #[test]
    fn analyst_prompt_ends_with_message_then_price() {
        let set = TemplateSet::default();
        let s = "I can do $100.";
        let text = render(set.get(Role::Analyst), &analyst_context(s)).unwrap();
        assert!(text.ends_with(&format!("{s}\nPrice:")));
    }

    #[test]
    fn missing_placeholder_is_named() {
        let set = TemplateSet::default();
        match render(set.get(Role::SellerSystem), &Context::new()) {
            Err(PromptError::MissingPlaceholder(n)) => assert_eq!(n, "product_info"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unterminated_placeholder() {
        let t = PromptTemplate::new(Role::Judge, "a {{b");
        assert!(matches!(render(&t, &Context::new()), Err(PromptError::Unterminated(2))));
    }

    #[test]
    fn defaults_carry_role_constraints() {
        let set = TemplateSet::default();
        let has = |r: Role, s: &str| assert!(set.get(r).body.contains(s), "{r}: {s}");
        has(Role::BuyerSystem, "You must not exceed your budget");
        has(Role::SellerSystem, "You must not sell below the Wholesale Price");
        has(Role::BuyerGreeting, "without revealing your role");
        has(Role::Judge, "ACCEPTANCE, REJECTION, or CONTINUE");
        has(Role::Analyst, "Return only the numerical price");
    }

    #[test]
    fn every_default_renders_completely() {
        let set = TemplateSet::default();
        let p = camry();
        let contexts = [
            (Role::BuyerSystem, buyer_context(&(&p).into(), Money::from_dollars(1))),
            (Role::SellerSystem, seller_context(&p)),
            (Role::BuyerGreeting, greeting_context(&(&p).into(), None)),
            (Role::Judge, judge_context("x", Some("y"))),
            (Role::Analyst, analyst_context("z")),
        ];
        for (role, ctx) in contexts {
            let text = render(set.get(role), &ctx).unwrap();
            assert!(!text.contains("{{") && !text.contains("}}"), "{role}");
        }
    }

    #[test]
    fn directory_layout_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let set = TemplateSet::default();
        for role in Role::ALL {
            std::fs::write(dir.path().join(role.file_name()), &set.get(role).body).unwrap();
        }
        std::fs::write(
            dir.path().join(AXES_FILE),
            include_str!("../templates/strategy_axes.json"),
        )
        .unwrap();
        let loaded = TemplateSet::from_dir(dir.path()).unwrap();
        assert_eq!(loaded.hashes(), set.hashes());
        std::fs::remove_file(dir.path().join("judge.txt")).unwrap();
        assert!(matches!(TemplateSet::from_dir(dir.path()), Err(PromptError::Io { .. })));
    }

    #[test]
    fn action_space_has_96_distinct_entries() {
        let all = enumerate_actions();
        assert_eq!(all.len(), 96);
        let distinct: HashSet<_> = all.iter().collect();
        assert_eq!(distinct.len(), 96);
        assert_eq!(
            all[0],
            StrategyAction {
                budget_emphasis: BudgetEmphasis::Hard,
                price_increase_policy: PriceIncreasePolicy::EndNow,
                exit_turns: 2,
                progress_threshold: ProgressThreshold::Tiny,
                concession_style: ConcessionStyle::None,
                non_price_ask: false,
            }
        );
        assert!(StrategyAction::from_index(96).is_err());
    }

    #[test]
    fn brute_force_reindex() {
        // Nested loops in axis order must visit indices 0..96 in sequence.
        let mut i = 0;
        for be in [BudgetEmphasis::Hard, BudgetEmphasis::MediumHard] {
            for pip in [PriceIncreasePolicy::EndNow, PriceIncreasePolicy::WarnThenEnd] {
                for et in EXIT_TURNS {
                    for pt in [ProgressThreshold::Tiny, ProgressThreshold::Small] {
                        for cs in [ConcessionStyle::None, ConcessionStyle::TinySteps] {
                            for np in [false, true] {
                                let a = StrategyAction {
                                    budget_emphasis: be,
                                    price_increase_policy: pip,
                                    exit_turns: et,
                                    progress_threshold: pt,
                                    concession_style: cs,
                                    non_price_ask: np,
                                };
                                assert_eq!(a.index(), i);
                                assert_eq!(StrategyAction::from_index(i).unwrap(), a);
                                i += 1;
                            }
                        }
                    }
                }
            }
        }
        assert_eq!(i, 96);
    }

    #[test]
    fn progress_thresholds_are_ratios() {
        assert_eq!(ProgressThreshold::Tiny.ratio(), 0.003);
        assert_eq!(ProgressThreshold::Small.ratio(), 0.008);
    }

    #[test]
    fn strategy_prompt_snapshot_and_determinism() {
        let set = TemplateSet::default();
        let mut a = enumerate_actions()[0];
        a.exit_turns = 3;
        let text = render_strategy_prompt(set.get(Role::BuyerSystem), &a, &set.axes);
        assert!(text.contains("makes no progress for 3 consecutive turns"));
        assert_eq!(
            text,
            render_strategy_prompt(set.get(Role::BuyerSystem), &a, &set.axes)
        );
        assert!(text.starts_with(&set.get(Role::BuyerSystem).body));
        assert!(text.ends_with("does not exceed your budget."));
    }

    #[test]
    fn concession_axis_changes_exactly_one_line() {
        let set = TemplateSet::default();
        for a in enumerate_actions()
            .into_iter()
            .filter(|a| a.concession_style == ConcessionStyle::None)
        {
            let mut b = a;
            b.concession_style = ConcessionStyle::TinySteps;
            let ta = render_strategy_prompt(set.get(Role::BuyerSystem), &a, &set.axes);
            let tb = render_strategy_prompt(set.get(Role::BuyerSystem), &b, &set.axes);
            let diff: Vec<_> = ta.lines().zip(tb.lines()).filter(|(x, y)| x != y).collect();
            assert_eq!(ta.lines().count(), tb.lines().count());
            assert_eq!(diff.len(), 1);
            assert_eq!(diff[0].0, set.axes.concession_style["none"]);
            assert_eq!(diff[0].1, set.axes.concession_style["tiny_steps"]);
        }
    }

    #[test]
    fn private_values_do_not_leak_across_roles() {
        let set = TemplateSet::default();
        let p = camry();
        for level in BudgetLevel::ALL {
            let beta = derive_budget(&p, level);
            let public = PublicProduct::from(&p);
            let mut buyer_texts = vec![
                render(set.get(Role::BuyerSystem), &buyer_context(&public, beta)).unwrap(),
                render(set.get(Role::BuyerGreeting), &greeting_context(&public, Some(beta))).unwrap(),
            ];
            for a in enumerate_actions() {
                buyer_texts.push(render(&set.strategy_prompt(&a), &buyer_context(&public, beta)).unwrap());
            }
            let seller_text = render(set.get(Role::SellerSystem), &seller_context(&p)).unwrap();
            for t in &buyer_texts {
                assert!(!t.contains("Wholesale Price:"));
                // At the wholesale level the budget equals p_w by construction.
                if beta != p.wholesale_price {
                    assert!(!t.contains(&p.wholesale_price.to_string()));
                }
            }
            assert!(seller_text.contains(&p.wholesale_price.usd()));
            if beta != p.retail_price && beta != p.wholesale_price {
                assert!(!seller_text.contains(&beta.to_string()));
            }
        }
    }
}
