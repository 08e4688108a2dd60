"""Run configuration: TOML file with environment-variable secrets.

Example::

    [alignment]
    beta_match_threshold = 0.75

    [ir]
    unroll_default = 3

    [metrics]
    max_exact_orders = 10

    [scpo]
    lambda_vote = 0.5
    beta_dpo = 0.1
    alpha_nll = 0.05

    [embedder]
    kind = "lexical"            # or "http"
    endpoint = ""               # required when kind = "http"

    [llm]
    endpoint = ""
    model = ""
    api_key_env = "FLOWGAUGE_API_KEY"

    [perturb]
    plan = [
        {kind = "paraphrasing"},
        {kind = "requirement_augmentation"},
        {kind = "noise", band = "light"},
        {kind = "noise", band = "moderate"},
        {kind = "noise", band = "heavy"},
    ]

    [run]
    workers = 4
    base_seed = 0

    [paths]
    out_dir = "out"

The API key itself never lives in the file; only the name of the
environment variable holding it does.
"""
from __future__ import annotations

import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .alignment import Embedder, HttpEmbedder, LexicalEmbedder
from .perturb import (
    LOCAL_NOISE_KIND,
    PERTURBATION_KINDS,
    HttpChatClient,
    IntensityBand,
    PlanStep,
)

DEFAULT_PLAN: tuple[dict[str, Any], ...] = (
    {"kind": "paraphrasing"},
    {"kind": "requirement_augmentation"},
    {"kind": "noise", "band": "light"},
    {"kind": "noise", "band": "moderate"},
    {"kind": "noise", "band": "heavy"},
)


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    beta_match_threshold: float = 0.75
    unroll_default: int = 3
    max_exact_orders: int = 10
    lambda_vote: float = 0.5
    beta_dpo: float = 0.1
    alpha_nll: float = 0.05
    embedder_kind: str = "lexical"
    embedder_endpoint: str = ""
    llm_endpoint: str = ""
    llm_model: str = ""
    llm_api_key_env: str = "FLOWGAUGE_API_KEY"
    llm_timeout: float = 60.0
    llm_max_retries: int = 3
    llm_backoff: float = 1.0
    plan: list[dict[str, Any]] = field(default_factory=lambda: [dict(p) for p in DEFAULT_PLAN])
    workers: int = 4
    base_seed: int = 0
    seeds: list[int] = field(default_factory=list)
    paths: dict[str, str] = field(default_factory=dict)
    kind_overrides: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not 0.0 <= self.beta_match_threshold <= 1.0:
            raise ConfigError("alignment.beta_match_threshold must be in [0, 1]")
        if self.unroll_default < 1:
            raise ConfigError("ir.unroll_default must be >= 1")
        if self.max_exact_orders < 0:
            raise ConfigError("metrics.max_exact_orders must be >= 0")
        if self.lambda_vote < 0:
            raise ConfigError("scpo.lambda_vote must be >= 0")
        if self.beta_dpo <= 0:
            raise ConfigError("scpo.beta_dpo must be > 0")
        if self.alpha_nll < 0:
            raise ConfigError("scpo.alpha_nll must be >= 0")
        if self.embedder_kind not in ("lexical", "http"):
            raise ConfigError("embedder.kind must be 'lexical' or 'http'")
        if self.embedder_kind == "http" and not self.embedder_endpoint:
            raise ConfigError("embedder.endpoint is required when embedder.kind = 'http'")
        if self.workers < 1:
            raise ConfigError("run.workers must be >= 1")

    @staticmethod
    def load(path: str | Path | None) -> "RunConfig":
        if path is None:
            return RunConfig()
        try:
            with open(path, "rb") as handle:
                raw = tomllib.load(handle)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML in {path}: {exc}")
        return RunConfig.from_mapping(raw)

    @staticmethod
    def from_mapping(raw: Mapping[str, Any]) -> "RunConfig":
        def section(name: str) -> Mapping[str, Any]:
            value = raw.get(name, {})
            if not isinstance(value, Mapping):
                raise ConfigError(f"[{name}] must be a table")
            return value

        alignment = section("alignment")
        ir = section("ir")
        metrics = section("metrics")
        scpo = section("scpo")
        embedder = section("embedder")
        llm = section("llm")
        perturb = section("perturb")
        run = section("run")
        paths = section("paths")
        try:
            return RunConfig(
                beta_match_threshold=float(alignment.get("beta_match_threshold", 0.75)),
                unroll_default=int(ir.get("unroll_default", 3)),
                max_exact_orders=int(metrics.get("max_exact_orders", 10)),
                lambda_vote=float(scpo.get("lambda_vote", 0.5)),
                beta_dpo=float(scpo.get("beta_dpo", 0.1)),
                alpha_nll=float(scpo.get("alpha_nll", 0.05)),
                embedder_kind=str(embedder.get("kind", "lexical")),
                embedder_endpoint=str(embedder.get("endpoint", "")),
                llm_endpoint=str(llm.get("endpoint", "")),
                llm_model=str(llm.get("model", "")),
                llm_api_key_env=str(llm.get("api_key_env", "FLOWGAUGE_API_KEY")),
                llm_timeout=float(llm.get("timeout", 60.0)),
                llm_max_retries=int(llm.get("max_retries", 3)),
                llm_backoff=float(llm.get("backoff", 1.0)),
                plan=[dict(step) for step in perturb.get("plan", [dict(p) for p in DEFAULT_PLAN])],
                workers=int(run.get("workers", 4)),
                base_seed=int(run.get("base_seed", 0)),
                seeds=[int(s) for s in run.get("seeds", [])],
                paths={k: str(v) for k, v in paths.items()},
                kind_overrides={k: str(v) for k, v in section("ir").get("kind_overrides", {}).items()},
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad config value: {exc}") from exc

    def build_embedder(self) -> Embedder:
        if self.embedder_kind == "http":
            return HttpEmbedder(self.embedder_endpoint)
        return LexicalEmbedder()

    def build_chat_client(self) -> HttpChatClient | None:
        if not self.llm_endpoint:
            return None
        api_key = os.environ.get(self.llm_api_key_env) or None
        return HttpChatClient(
            self.llm_endpoint,
            self.llm_model,
            api_key=api_key,
            timeout=self.llm_timeout,
            max_retries=self.llm_max_retries,
            backoff=self.llm_backoff,
        )

    def plan_steps(self, base_seed: int | None = None) -> list[PlanStep]:
        """Materialize the perturbation plan.

        Seed precedence for noise steps lacking an explicit seed: a
        ``base_seed`` argument (the CLI --seed flag) gives position-offset
        seeds; otherwise the i-th unseeded step takes ``run.seeds[i]``
        (cycling); otherwise ``run.base_seed + position``. All three keep
        runs reproducible.
        """
        steps: list[PlanStep] = []
        unseeded = 0
        for position, entry in enumerate(self.plan):
            kind = str(entry.get("kind", ""))
            if kind != LOCAL_NOISE_KIND and kind not in PERTURBATION_KINDS:
                raise ConfigError(f"perturb.plan[{position}]: unknown kind '{kind}'")
            band = None
            if "band" in entry:
                band = IntensityBand.named(str(entry["band"]))
            seed = entry.get("seed")
            if kind == LOCAL_NOISE_KIND:
                if band is None:
                    raise ConfigError(f"perturb.plan[{position}]: noise steps need a band")
                if seed is None:
                    if base_seed is not None:
                        seed = base_seed + position
                    elif self.seeds:
                        seed = self.seeds[unseeded % len(self.seeds)]
                    else:
                        seed = self.base_seed + position
                    unseeded += 1
            steps.append(PlanStep(kind=kind, band=band, seed=None if seed is None else int(seed)))
        return steps
