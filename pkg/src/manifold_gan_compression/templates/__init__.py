"""
Templates for the Markdown run report.
"""

from typing import Any

from jinja2 import DictLoader, Environment, StrictUndefined


class ReportTemplates:
    """Manager for report templates."""

    def __init__(self):
        """Initialize with default templates."""
        self.templates = {
            "summary.md": self._summary_template,
            "ablation.md": self._ablation_template,
            "survival.md": self._survival_template,
        }
        self.env = Environment(
            loader=DictLoader(self.templates),
            undefined=StrictUndefined,
            trim_blocks=True,
            lstrip_blocks=True,
        )
        self.env.filters["pct"] = lambda v: "n/a" if v is None or v != v else f"{100.0 * v:.1f}%"
        self.env.filters["num"] = lambda v: f"{v:,.0f}"
        self.env.filters["f4"] = lambda v: "n/a" if v is None or v != v else f"{v:.4f}"

    def render(self, name: str, **context: Any) -> str:
        return self.env.get_template(name).render(**context)

    @property
    def _summary_template(self) -> str:
        """Run summary."""
        return '''# Run report

Seed {{ seed }}, GAN loss `{{ flavor }}`, variant **{{ variant }}**.

## Compression

| Model | MACs | Original MACs | Compression ratio | Active channels |
|---|---:|---:|---:|---:|
{% for role, rep in compression.items() %}
| {{ role }} | {{ rep.macs | num }} | {{ rep.original_macs | num }} | {{ rep.compression_ratio | pct }} | {{ rep.active_fraction | pct }} |
{% endfor %}

{% if budget is not none %}
Generator budget p*T_total = {{ budget | num }} prunable MACs; achieved {{ compression.generator.prunable_macs | num }} ({{ "within" if within_budget else "over" }} budget).
{% endif %}

{% if stability %}
## Pruning stability

| Statistic | Value |
|---|---:|
{% for key, value in stability.items() %}
| {{ key }} | {{ value }} |
{% endfor %}
{% endif %}

{% if metrics %}
## Evaluation ({{ metrics.split }} split)

| Generator | Fréchet proxy | L1 |
|---|---:|---:|
{% for name, m in metrics.generators.items() %}
| {{ name }} | {{ m.frechet | f4 }} | {{ m.l1 | f4 }} |
{% endfor %}

{% if metrics.neighborhood_overlap is defined %}
Neighborhood overlap between original and pruned generators: {{ metrics.neighborhood_overlap | f4 }}.
{% endif %}
{% endif %}

{% if absent %}
Not included (stage not run): {{ absent | join(", ") }}.
{% endif %}
'''

    @property
    def _ablation_template(self) -> str:
        """Ablation table, one row per variant (medians over seeds)."""
        return '''# Ablation

| Variant | D pruning | Agents | Feedback | Manifold | KD | G compression | Fréchet proxy | L1 | Seeds |
|---|:-:|:-:|:-:|:-:|:-:|---:|---:|---:|---:|
{% for row in rows %}
| {{ row.variant }} | {{ "x" if row.prune_D else "" }} | {{ "x" if row.use_agents else "" }} | {{ "x" if row.exchange_feedback else "" }} | {{ "x" if row.manifold_real_set else "" }} | {{ "x" if row.use_kd else "" }} | {{ row.compression_ratio | pct }} | {{ row.frechet | f4 }} | {{ row.l1 | f4 }} | {{ row.seeds }} |
{% endfor %}
'''

    @property
    def _survival_template(self) -> str:
        """Per-layer surviving channels."""
        return '''# Surviving channels

{% for role, layers in survival.items() %}
## {{ role }}

| Layer | Kept | Total |
|---|---:|---:|
{% for name, counts in layers.items() %}
| {{ name }} | {{ counts.kept }} | {{ counts.total }} |
{% endfor %}

{% endfor %}
'''
