"""Experiment specifications and the generators that produce them."""
import hashlib
import json
import re
from dataclasses import dataclass, field
from importlib import import_module
from typing import Any, Dict, List, Literal, Optional, Tuple

from monty.json import MSONable
from pydantic import BaseModel, ConfigDict, Field, model_validator

from vjdd.core.config import RunConfig
from vjdd.core.degrade import NOISE_LEVELS

# loss weights that stage 1 never reads
_FINETUNE_ONLY_KEYS = (
    "loss.lam",
    "loss.alpha",
    "loss.beta",
    "loss.gamma",
    "loss.long_term_gap",
    "loss.perceptual_model",
    "schedule.finetune_steps",
)


class AblationFlags(BaseModel):
    """Components removed from the full model."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    no_temporal: bool = Field(False, description="w/o L_t: no DTC, long DTC, RPC")
    no_perceptual: bool = Field(False, description="w/o L_p")
    no_hidden: bool = Field(False, description="w/o H_t: zero hidden input")
    shallow_hidden: bool = Field(False, description="w/ SH_t: previous I_{t-1}")
    no_dtc: bool = Field(False, description="w/o L_DTC: no DTC, long DTC")
    no_rpc: bool = Field(False, description="w/o L_RPC")

    @model_validator(mode="after")
    def check_hidden(self):
        """The hidden input is either removed or replaced, not both."""
        if self.no_hidden and self.shallow_hidden:
            raise ValueError("no_hidden and shallow_hidden are exclusive.")
        return self

    def overrides(self) -> Dict[str, Any]:
        """Dotted-key configuration overrides of these flags."""
        out: Dict[str, Any] = {}
        if self.no_temporal or self.no_dtc:
            out.update({"loss.alpha": 0.0, "loss.beta": 0.0})
        if self.no_temporal or self.no_rpc:
            out["loss.gamma"] = 0.0
        if self.no_perceptual:
            out["loss.lam"] = 0.0
        if self.no_hidden:
            out["model.hidden_mode"] = "none"
        if self.shallow_hidden:
            out["model.hidden_mode"] = "shallow"
        return out

    @property
    def label(self) -> str:
        """Row label of the variant."""
        for label, flags in VARIANTS.items():
            if flags == self:
                return label
        active = [name for name, value in self.model_dump().items() if value]
        return "+".join(active)

    @classmethod
    def from_label(cls, label: str) -> "AblationFlags":
        """Flags of a variant row label."""
        try:
            return VARIANTS[label]
        except KeyError:
            raise ValueError(
                f'Unknown variant "{label}"; expected one of {list(VARIANTS)}.'
            )


VARIANTS: Dict[str, AblationFlags] = {
    "w/o L_t, w/o L_p": AblationFlags(no_temporal=True, no_perceptual=True),
    "w/o L_t": AblationFlags(no_temporal=True),
    "w/o L_t, w/o H_t": AblationFlags(no_temporal=True, no_hidden=True),
    "w/o L_t, w/ SH_t": AblationFlags(no_temporal=True, shallow_hidden=True),
    "w/o L_RPC": AblationFlags(no_rpc=True),
    "w/o L_DTC": AblationFlags(no_dtc=True),
    "full model": AblationFlags(),
}
TABLE_ROWS = (
    "w/o L_t",
    "w/o L_t, w/o H_t",
    "w/o L_t, w/ SH_t",
    "w/o L_RPC",
    "w/o L_DTC",
    "full model",
)


def slugify(label: str) -> str:
    """Directory-safe form of a label."""
    return re.sub(r"[^a-z0-9]+", "_", label.lower()).strip("_") or "run"


class ExperimentSpec(BaseModel):
    """One training and evaluation experiment.

    Attributes:
        name: Label of the experiment (the variant row for ablations).
        config: Base run configuration; dataset paths live in
            ``config.data.train_dirs``.
        level: Training noise: "sampled" draws from ``config.noise``,
            "low"/"high" fix it to the evaluation setting.
        eval_level: Evaluation noise level.
        flags: Ablation flags applied on top of ``config``.
    """

    model_config = ConfigDict(extra="forbid")

    name: str = "full model"
    config: RunConfig = Field(default_factory=RunConfig)
    level: Literal["sampled", "low", "high"] = "sampled"
    eval_level: Literal["low", "high"] = "low"
    flags: AblationFlags = Field(default_factory=AblationFlags)

    @property
    def slug(self) -> str:
        """Directory name of the experiment."""
        return slugify(self.name)

    def resolved_config(self) -> RunConfig:
        """Configuration with the flags and the training noise level applied."""
        overrides = self.flags.overrides()
        if self.level != "sampled":
            sigma_s, sigma_r = NOISE_LEVELS[self.level].as_tuple()
            overrides.update(
                {
                    "noise.sigma_s_min": sigma_s,
                    "noise.sigma_s_max": sigma_s,
                    "noise.sigma_r_min": sigma_r,
                    "noise.sigma_r_max": sigma_r,
                }
            )
        return self.config.updated(overrides)

    def pretrain_key(self) -> str:
        """Hash of everything stage 1 depends on.

        Specs with equal keys can share one pretrain checkpoint.
        """
        flat = self.resolved_config().flat()
        for key in list(flat):
            if key in _FINETUNE_ONLY_KEYS or key.startswith("paths."):
                del flat[key]
        blob = json.dumps(flat, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def as_dict(self):
        """Return a dict representation of the spec."""
        d = {"@module": self.__class__.__module__, "@class": self.__class__.__name__}
        try:
            parent_module = self.__class__.__module__.split(".", maxsplit=1)[0]
            d["@version"] = str(import_module(parent_module).__version__)
        except (AttributeError, ImportError):
            d["@version"] = None
        d.update(self.model_dump(mode="json"))
        return d

    @classmethod
    def from_dict(cls, d):
        """Construct the spec from its dict representation."""
        data = {k: v for k, v in d.items() if not k.startswith("@")}
        if isinstance(data.get("config"), dict):
            data["config"] = RunConfig.from_dict(data["config"])
        return cls.model_validate(data)


@dataclass
class ExperimentGenerator(MSONable):
    """A class to generate experiment specifications."""

    calc_type: str = "vjdd_experiment"
    base_config: RunConfig = field(default_factory=RunConfig)
    level: str = "sampled"
    eval_level: str = "low"

    def get_spec(
        self,
        name: str = "full model",
        flags: Optional[AblationFlags] = None,
        overrides: Optional[Dict[str, Any]] = None,
    ) -> ExperimentSpec:
        """Get an ExperimentSpec."""
        config = self.base_config
        if overrides:
            config = config.updated(overrides)
        return ExperimentSpec(
            name=name,
            config=config,
            level=self.level,
            eval_level=self.eval_level,
            flags=flags or AblationFlags(),
        )


@dataclass
class AblationGenerator(ExperimentGenerator):
    """Generator of the ablation variants, all sharing one base configuration."""

    calc_type: str = "vjdd_ablation"
    variants: Tuple[str, ...] = tuple(VARIANTS)

    def get_specs(self) -> List[ExperimentSpec]:
        """One spec per variant, in table order."""
        return [
            self.get_spec(name=label, flags=AblationFlags.from_label(label))
            for label in self.variants
        ]
