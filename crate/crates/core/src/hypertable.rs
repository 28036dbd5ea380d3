//! Tree-shaped aggregation table over the store, re-evaluated for a movable
//! time cursor and reconfigured through an aggregation mode.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{MetricKey, ObjectId, Window};
use crate::store::{Agg, CubeStore, Grain, ObjectSel, SliceSpec, StoreError};

/// Name of the leaf level; every mode's level list ends with it.
pub const OBJECT_LEVEL: &str = "object";
pub const ROOT_LABEL: &str = "all";
pub const REPORT_SCHEMA: &str = "hypertable/v1";

/// Assigns each monitoring object one label per hierarchy level.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HierarchyMap {
    /// Levels above the object, outermost first (e.g. city, district, network).
    pub levels: Vec<String>,
    pub paths: BTreeMap<ObjectId, Vec<String>>,
}

impl HierarchyMap {
    pub fn validate(&self) -> Result<(), HyperTableError> {
        let mut seen = BTreeSet::new();
        for l in &self.levels {
            if l == OBJECT_LEVEL || !seen.insert(l) {
                return Err(HyperTableError::InvalidHierarchy(format!("bad level `{l}`")));
            }
        }
        for (obj, path) in &self.paths {
            if path.len() != self.levels.len() {
                return Err(HyperTableError::InvalidHierarchy(format!(
                    "object `{obj}` has {} labels for {} levels",
                    path.len(),
                    self.levels.len()
                )));
            }
        }
        Ok(())
    }

    pub fn objects(&self) -> BTreeSet<ObjectId> {
        self.paths.keys().cloned().collect()
    }

    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnAgg {
    Sum,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub key: MetricKey,
    pub agg: ColumnAgg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorRule {
    pub column: MetricKey,
    /// Strictly ascending; a value `v >= thresholds[i]` is past boundary `i`.
    pub thresholds: Vec<f64>,
    /// One more class than thresholds, lowest band first.
    pub classes: Vec<String>,
}

impl ColorRule {
    pub fn class_of(&self, value: f64) -> &str {
        let band = self.thresholds.iter().take_while(|t| value >= **t).count();
        &self.classes[band]
    }
}

/// The editable configuration of a table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggMode {
    pub id: String,
    pub columns: Vec<ColumnSpec>,
    /// Selected hierarchy levels, outermost first, ending with `object`.
    pub levels: Vec<String>,
    #[serde(default)]
    pub color_rules: Vec<ColorRule>,
    pub grain: Grain,
}

impl AggMode {
    /// Checks the mode against a hierarchy; store resolvability is checked by
    /// [`validate_columns`](Self::validate_columns).
    pub fn validate(&self, hierarchy: &HierarchyMap) -> Result<(), HyperTableError> {
        if self.levels.last().map(String::as_str) != Some(OBJECT_LEVEL) {
            return Err(HyperTableError::InvalidLevels(format!(
                "levels must end with `{OBJECT_LEVEL}`"
            )));
        }
        let mut next = 0;
        for l in &self.levels[..self.levels.len() - 1] {
            match hierarchy.levels[next..].iter().position(|h| h == l) {
                Some(p) => next += p + 1,
                None => {
                    return Err(HyperTableError::InvalidLevels(format!(
                        "level `{l}` unknown or out of hierarchy order"
                    )))
                }
            }
        }
        if self.columns.is_empty() {
            return Err(HyperTableError::UnknownColumn("no visible columns".into()));
        }
        let mut seen = BTreeSet::new();
        for c in &self.columns {
            if !seen.insert(&c.key) {
                return Err(HyperTableError::UnknownColumn(format!("duplicate column `{}`", c.key)));
            }
        }
        let mut ruled = BTreeSet::new();
        for r in &self.color_rules {
            let ascending = r.thresholds.windows(2).all(|w| w[0] < w[1]);
            if !ascending
                || r.thresholds.iter().any(|t| !t.is_finite())
                || r.classes.len() != r.thresholds.len() + 1
            {
                return Err(HyperTableError::InvalidThresholds(r.column.to_string()));
            }
            if !ruled.insert(&r.column) {
                return Err(HyperTableError::InvalidThresholds(format!(
                    "two rules for `{}`",
                    r.column
                )));
            }
        }
        Ok(())
    }

    /// Actual-value columns must name a stream the store holds.
    pub fn validate_columns(&self, store: &CubeStore) -> Result<(), HyperTableError> {
        let known = store.metric_keys();
        for c in &self.columns {
            if !c.key.is_forecast() && !known.contains(&c.key) {
                return Err(HyperTableError::UnknownColumn(c.key.to_string()));
            }
        }
        Ok(())
    }

    fn rule(&self, column: &MetricKey) -> Option<&ColorRule> {
        self.color_rules.iter().find(|r| &r.column == column)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CursorMode {
    Archive,
    Current,
    Forecast,
    Scenario,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeCursor {
    pub interval: Window,
    pub mode: CursorMode,
    /// Forecast set read by forecast columns in scenario mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<String>,
}

impl TimeCursor {
    pub fn archive(interval: Window) -> Self {
        TimeCursor {
            interval,
            mode: CursorMode::Archive,
            scenario: None,
        }
    }

    pub fn validate(&self) -> Result<(), HyperTableError> {
        if !self.interval.is_valid() {
            return Err(HyperTableError::InvalidCursor("empty interval".into()));
        }
        match (&self.mode, &self.scenario) {
            (CursorMode::Scenario, None) => {
                Err(HyperTableError::InvalidCursor("scenario mode needs a scenario name".into()))
            }
            (CursorMode::Scenario, Some(name)) if name.is_empty() || name.contains('.') => {
                Err(HyperTableError::InvalidCursor(format!("bad scenario name `{name}`")))
            }
            _ => Ok(()),
        }
    }

    /// Store key actually read for a visible column.
    pub fn resolve(&self, column: &MetricKey) -> MetricKey {
        match (&self.mode, column) {
            (CursorMode::Scenario, MetricKey::Forecast(m)) => {
                MetricKey::forecast_for(*m, self.scenario.as_deref())
            }
            _ => column.clone(),
        }
    }

    pub fn shift(&self, by: i64) -> TimeCursor {
        TimeCursor {
            interval: self.interval.shift(by),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HyperTableError {
    #[error("invalid hierarchy: {0}")]
    InvalidHierarchy(String),
    #[error("invalid levels: {0}")]
    InvalidLevels(String),
    #[error("unknown column: {0}")]
    UnknownColumn(String),
    #[error("invalid thresholds for `{0}`")]
    InvalidThresholds(String),
    #[error("invalid cursor: {0}")]
    InvalidCursor(String),
    #[error("no persisted forecast for `{0}` in the cursor interval")]
    ForecastUnavailable(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HtCell {
    pub column: MetricKey,
    /// `None` renders as the absent marker, never as zero.
    pub value: Option<f64>,
    pub count: u64,
    pub color: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HtNode {
    pub level: String,
    pub label: String,
    /// Labels from the root's children down to this node, joined by `/`.
    pub path: String,
    pub cells: Vec<HtCell>,
    pub children: Vec<HtNode>,
}

impl HtNode {
    pub fn is_leaf(&self) -> bool {
        self.level == OBJECT_LEVEL
    }

    pub fn depth(&self) -> usize {
        1 + self.children.iter().map(HtNode::depth).max().unwrap_or(0)
    }

    pub fn leaves(&self) -> Vec<&HtNode> {
        let mut out = Vec::new();
        self.walk(&mut |n| {
            if n.is_leaf() {
                out.push(n)
            }
        });
        out
    }

    pub fn walk<'a>(&'a self, f: &mut impl FnMut(&'a HtNode)) {
        f(self);
        for c in &self.children {
            c.walk(f);
        }
    }

    pub fn find(&self, path: &str) -> Option<&HtNode> {
        if self.path == path {
            return Some(self);
        }
        self.children.iter().find_map(|c| c.find(path))
    }

    /// Shape only: levels, labels and nesting.
    pub fn shape(&self) -> Vec<(usize, String, String)> {
        let mut out = Vec::new();
        fn go(n: &HtNode, d: usize, out: &mut Vec<(usize, String, String)>) {
            out.push((d, n.level.clone(), n.label.clone()));
            for c in &n.children {
                go(c, d + 1, out);
            }
        }
        go(self, 0, &mut out);
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    /// Objects with stored data but no hierarchy path; left out of the tree.
    pub unmapped: Vec<ObjectId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperTable {
    pub root: HtNode,
    pub mode: AggMode,
    pub cursor: TimeCursor,
    pub built_at_version: u64,
    pub hierarchy: HierarchyMap,
    pub report: BuildReport,
}

/// Folds present child cells in child order.
fn combine(agg: ColumnAgg, children: &[&HtCell]) -> (Option<f64>, u64) {
    let present: Vec<&&HtCell> = children.iter().filter(|c| c.value.is_some()).collect();
    if present.is_empty() {
        return (None, 0);
    }
    let count: u64 = present.iter().map(|c| c.count).sum();
    match agg {
        ColumnAgg::Sum => {
            let mut acc = 0.0;
            for c in &present {
                acc += c.value.expect("present");
            }
            (Some(acc), count)
        }
        ColumnAgg::Mean => {
            let mut acc = 0.0;
            for c in &present {
                acc += c.value.expect("present") * c.count as f64;
            }
            (Some(acc / count as f64), count)
        }
    }
}

fn color(mode: &AggMode, column: &MetricKey, value: Option<f64>) -> Option<String> {
    let rule = mode.rule(column)?;
    value.map(|v| rule.class_of(v).to_string())
}

/// Leaf values per (object, column index): value and number of values.
type LeafValues = BTreeMap<(ObjectId, usize), (f64, u64)>;

fn leaf_values(
    store: &CubeStore,
    objects: &BTreeSet<ObjectId>,
    mode: &AggMode,
    cursor: &TimeCursor,
) -> Result<LeafValues, HyperTableError> {
    let mut out = LeafValues::new();
    if objects.is_empty() {
        return Ok(out);
    }
    for (ix, col) in mode.columns.iter().enumerate() {
        let key = cursor.resolve(&col.key);
        let spec = SliceSpec::new(
            ObjectSel::Set(objects.clone()),
            [key],
            cursor.interval,
            mode.grain,
            Agg::Sum,
        );
        let slice = store.query_slice(&spec)?;
        for cell in &slice.cells {
            if let Some(v) = cell.value {
                let e = out.entry((cell.object_id.clone(), ix)).or_insert((0.0, 0));
                e.0 += v;
                e.1 += cell.valid;
            }
        }
    }
    Ok(out)
}

fn check_forecasts(store: &CubeStore, mode: &AggMode, cursor: &TimeCursor) -> Result<(), HyperTableError> {
    if cursor.mode != CursorMode::Forecast && cursor.mode != CursorMode::Scenario {
        return Ok(());
    }
    let forecast_cols: Vec<MetricKey> = mode
        .columns
        .iter()
        .filter(|c| c.key.is_forecast())
        .map(|c| cursor.resolve(&c.key))
        .collect();
    if forecast_cols.is_empty() {
        return Err(HyperTableError::ForecastUnavailable("no forecast columns".into()));
    }
    for key in forecast_cols {
        let facts = store.facts(&ObjectSel::All, &BTreeSet::from([key.clone()]), cursor.interval);
        if facts.is_empty() {
            return Err(HyperTableError::ForecastUnavailable(key.to_string()));
        }
    }
    Ok(())
}

struct Builder<'a> {
    mode: &'a AggMode,
    hierarchy: &'a HierarchyMap,
    level_ix: Vec<usize>,
    leaves: &'a LeafValues,
}

impl Builder<'_> {
    fn node(&self, depth: usize, label: String, path: Vec<String>, objects: Vec<&ObjectId>) -> HtNode {
        let level = self.mode.levels[depth - 1].clone();
        let path_str = path.join("/");
        if level == OBJECT_LEVEL {
            let obj = objects[0];
            let cells = self
                .mode
                .columns
                .iter()
                .enumerate()
                .map(|(ix, col)| {
                    let (value, count) = match self.leaves.get(&(obj.clone(), ix)) {
                        Some(&(sum, n)) if n > 0 => match col.agg {
                            ColumnAgg::Sum => (Some(sum), n),
                            ColumnAgg::Mean => (Some(sum / n as f64), n),
                        },
                        _ => (None, 0),
                    };
                    HtCell {
                        column: col.key.clone(),
                        color: color(self.mode, &col.key, value),
                        value,
                        count,
                    }
                })
                .collect();
            return HtNode {
                level,
                label,
                path: path_str,
                cells,
                children: vec![],
            };
        }
        let children = self.children(depth + 1, &path, objects);
        let cells = self.mode.columns.iter().enumerate().map(|(ix, col)| {
            let kids: Vec<&HtCell> = children.iter().map(|c| &c.cells[ix]).collect();
            let (value, count) = combine(col.agg, &kids);
            HtCell {
                column: col.key.clone(),
                color: color(self.mode, &col.key, value),
                value,
                count,
            }
        });
        HtNode {
            level,
            label,
            path: path_str,
            cells: cells.collect(),
            children,
        }
    }

    fn label(&self, depth: usize, obj: &ObjectId) -> String {
        match self.level_ix.get(depth - 1) {
            Some(&h) => self.hierarchy.paths[obj][h].clone(),
            None => obj.to_string(),
        }
    }

    fn children(&self, depth: usize, path: &[String], objects: Vec<&ObjectId>) -> Vec<HtNode> {
        let mut groups: BTreeMap<String, Vec<&ObjectId>> = BTreeMap::new();
        for obj in objects {
            groups.entry(self.label(depth, obj)).or_default().push(obj);
        }
        groups
            .into_iter()
            .map(|(label, objs)| {
                let mut p = path.to_vec();
                p.push(label.clone());
                self.node(depth, label, p, objs)
            })
            .collect()
    }

    fn root(&self) -> HtNode {
        let objects: Vec<&ObjectId> = self.hierarchy.paths.keys().collect();
        let children = self.children(1, &[], objects);
        let cells = self.mode.columns.iter().enumerate().map(|(ix, col)| {
            let kids: Vec<&HtCell> = children.iter().map(|c| &c.cells[ix]).collect();
            let (value, count) = combine(col.agg, &kids);
            HtCell {
                column: col.key.clone(),
                color: color(self.mode, &col.key, value),
                value,
                count,
            }
        });
        HtNode {
            level: "root".into(),
            label: ROOT_LABEL.into(),
            path: String::new(),
            cells: cells.collect(),
            children,
        }
    }
}

pub fn build(
    store: &CubeStore,
    hierarchy: &HierarchyMap,
    mode: &AggMode,
    cursor: &TimeCursor,
) -> Result<HyperTable, HyperTableError> {
    hierarchy.validate()?;
    mode.validate(hierarchy)?;
    mode.validate_columns(store)?;
    cursor.validate()?;
    check_forecasts(store, mode, cursor)?;
    let version = store.version();

    let mapped = hierarchy.objects();
    let unmapped: Vec<ObjectId> = store
        .objects()
        .into_iter()
        .filter(|o| !mapped.contains(o))
        .collect();
    let leaves = leaf_values(store, &mapped, mode, cursor)?;
    let level_ix = mode.levels[..mode.levels.len() - 1]
        .iter()
        .map(|l| hierarchy.levels.iter().position(|h| h == l).expect("validated"))
        .collect();
    let root = Builder {
        mode,
        hierarchy,
        level_ix,
        leaves: &leaves,
    }
    .root();
    Ok(HyperTable {
        root,
        mode: mode.clone(),
        cursor: cursor.clone(),
        built_at_version: version,
        hierarchy: hierarchy.clone(),
        report: BuildReport { unmapped },
    })
}

impl HyperTable {
    pub fn set_cursor(&self, store: &CubeStore, cursor: TimeCursor) -> Result<HyperTable, HyperTableError> {
        build(store, &self.hierarchy, &self.mode, &cursor)
    }

    pub fn edit_mode(&self, store: &CubeStore, mode: AggMode) -> Result<HyperTable, HyperTableError> {
        build(store, &self.hierarchy, &mode, &self.cursor)
    }

    /// Checks every internal node against a fold of its children. Returns
    /// the paths of nodes that disagree.
    pub fn consistency_violations(&self) -> Vec<String> {
        let mut bad = Vec::new();
        self.root.walk(&mut |n| {
            if n.children.is_empty() {
                return;
            }
            for (ix, col) in self.mode.columns.iter().enumerate() {
                let kids: Vec<&HtCell> = n.children.iter().map(|c| &c.cells[ix]).collect();
                let (value, count) = combine(col.agg, &kids);
                let cell = &n.cells[ix];
                if cell.value.map(f64::to_bits) != value.map(f64::to_bits) || cell.count != count {
                    bad.push(format!("{}:{}", n.path, col.key));
                }
            }
        });
        bad
    }

    pub fn to_report(&self) -> Report {
        Report {
            text: self.to_text(),
            json: self.to_json(),
            csv: self.to_csv(),
        }
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::json!({
            "schema": REPORT_SCHEMA,
            "mode": self.mode,
            "cursor": self.cursor,
            "built_at_version": self.built_at_version,
            "columns": self.mode.columns.iter().map(|c| c.key.to_string()).collect::<Vec<_>>(),
            "root": self.root,
            "unmapped": self.report.unmapped,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_json_value()).expect("table serializes") + "\n"
    }

    /// Reads the tree back from report JSON.
    pub fn root_from_json(text: &str) -> Result<HtNode, serde_json::Error> {
        let v: serde_json::Value = serde_json::from_str(text)?;
        serde_json::from_value(v["root"].clone())
    }

    fn to_text(&self) -> String {
        let mut out = String::new();
        let cols: Vec<String> = self.mode.columns.iter().map(|c| c.key.to_string()).collect();
        let _ = writeln!(out, "hypertable {} [{}]", self.mode.id, cols.join(", "));
        let _ = writeln!(
            out,
            "cursor {:?} [{}, {}) version {}",
            self.cursor.mode, self.cursor.interval.from, self.cursor.interval.to, self.built_at_version
        );
        fn go(n: &HtNode, depth: usize, out: &mut String) {
            let mut line = format!("{}{} ({})", "  ".repeat(depth), n.label, n.level);
            for c in &n.cells {
                let v = c.value.map_or_else(|| "absent".to_string(), fmt_value);
                let _ = write!(line, "  {}={} n={}", c.column, v, c.count);
                if let Some(col) = &c.color {
                    let _ = write!(line, " [{col}]");
                }
            }
            out.push_str(&line);
            out.push('\n');
            for ch in &n.children {
                go(ch, depth + 1, out);
            }
        }
        go(&self.root, 0, &mut out);
        out
    }

    fn to_csv(&self) -> String {
        let mut out = String::new();
        let mut header: Vec<String> = vec!["path".into()];
        header.extend(self.mode.levels.iter().cloned());
        for c in &self.mode.columns {
            header.push(c.key.to_string());
            header.push(format!("{}.count", c.key));
            header.push(format!("{}.color", c.key));
        }
        out.push_str(&header.join(","));
        out.push('\n');
        for leaf in self.root.leaves() {
            let mut row = vec![csv_field(&leaf.path)];
            row.extend(leaf.path.split('/').map(csv_field));
            for c in &leaf.cells {
                row.push(c.value.map(fmt_value).unwrap_or_default());
                row.push(c.count.to_string());
                row.push(c.color.as_deref().map(csv_field).unwrap_or_default());
            }
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Shortest representation that parses back to the same bits.
pub fn fmt_value(v: f64) -> String {
    format!("{v:?}")
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub text: String,
    pub json: String,
    pub csv: String,
}
