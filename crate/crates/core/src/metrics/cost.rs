use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::models::TokenCounts;

/// USD per million tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Price {
    pub input: f64,
    pub output: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PriceTable(pub BTreeMap<String, Price>);

impl PriceTable {
    pub fn insert(&mut self, model: impl Into<String>, input: f64, output: f64) {
        self.0.insert(model.into(), Price { input, output });
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        for (name, p) in &self.0 {
            if !(p.input >= 0.0 && p.output >= 0.0 && p.input.is_finite() && p.output.is_finite()) {
                return Err(MetricsError::InvalidPrice(name.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub per_model: BTreeMap<String, f64>,
    pub total: f64,
}

pub fn model_cost(tokens: TokenCounts, price: Price) -> f64 {
    tokens.input as f64 * price.input / 1e6 + tokens.output as f64 * price.output / 1e6
}

pub fn cost_of(totals: &BTreeMap<String, TokenCounts>, prices: &PriceTable) -> Result<CostBreakdown, MetricsError> {
    prices.validate()?;
    let mut per_model = BTreeMap::new();
    for (name, &tokens) in totals {
        let price = prices
            .0
            .get(name)
            .ok_or_else(|| MetricsError::UnpricedModel(name.clone()))?;
        per_model.insert(name.clone(), model_cost(tokens, *price));
    }
    let total = per_model.values().sum();
    Ok(CostBreakdown { per_model, total })
}

/// Two-decimal display form.
pub fn usd(v: f64) -> String {
    format!("{v:.2}")
}
