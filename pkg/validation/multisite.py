"""
Multisite protocol — several imaging sites, each its own fixed domain shift.

Four arrangements, each with held-out sites that are never trained on and
never adapted to:

    single-source   sources {0}      targets {1, 2}   held out {3}
    multi-source    sources {0, 1}   targets {2}      held out {3}
    multi-multi     sources {0, 1}   targets {2, 3}   held out {4}
    wide-heldout    sources {0, 1}   targets {2}      held out {3, 4, 5}

Source sites are pooled into one labeled training set and target sites into
one unlabeled adaptation set. Every site is scored separately afterwards;
source sites on their split's val images, target and held-out sites on all
their images.

Table: rows = methods (No Adapt included), columns = sites grouped as
source / target / held-out, cells = mean Dice over splits.
"""

import logging
from dataclasses import dataclass
from pathlib import Path

import pandas as pd

from engine import settings
from engine.config import DivergenceConfig, ExperimentConfig
from engine.errors import UsageError
from engine.trainer import fit
from sources.dataset import Dataset, split
from sources.synthetic import SceneSpec, generate, site_shift
from validation.evaluate import evaluate
from warehouse.loader import write_table
from warehouse.schema import MULTISITE_COLUMNS

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Protocol:
    name: str
    sources: tuple[int, ...]
    targets: tuple[int, ...]
    heldout: tuple[int, ...]

    @property
    def sites(self) -> tuple[int, ...]:
        return self.sources + self.targets + self.heldout


PROTOCOLS = {
    "single-source": Protocol("single-source", (0,), (1, 2), (3,)),
    "multi-source": Protocol("multi-source", (0, 1), (2,), (3,)),
    "multi-multi": Protocol("multi-multi", (0, 1), (2, 3), (4,)),
    "wide-heldout": Protocol("wide-heldout", (0, 1), (2,), (3, 4, 5)),
}


def site_datasets(protocol: Protocol, per_site: int, image_size: int, seed: int = 0) -> dict[int, Dataset]:
    """One labeled dataset per site, each with its own scene seed and shift."""
    datasets = {}
    for site in protocol.sites:
        role = "source" if site in protocol.sources else "target" if site in protocol.targets else "heldout"
        scene = SceneSpec(image_size=image_size, seed=seed + 7919 * (site + 1))
        if image_size < 64:
            scale = image_size / 64
            scene = SceneSpec(image_size=image_size, seed=scene.seed,
                              radius=(max(1.5, 5.0 * scale), max(2.0, 12.0 * scale)))
        datasets[site] = generate(scene, site_shift(site), per_site, role)
    return datasets


@dataclass
class MultisiteResult:
    rows: pd.DataFrame      # MULTISITE_COLUMNS
    table: pd.DataFrame
    out_dir: Path


def _column(protocol: Protocol, site: int) -> str:
    role = "source" if site in protocol.sources else "target" if site in protocol.targets else "heldout"
    return f"{role}:site{site}"


def run_multisite(protocol: Protocol | str, methods: list[DivergenceConfig], base: ExperimentConfig,
                  per_site: int = 60, seed: int = 0, out_dir: str | Path | None = None,
                  progress: bool = False) -> MultisiteResult:
    if isinstance(protocol, str):
        if protocol not in PROTOCOLS:
            raise UsageError(f"unknown protocol '{protocol}' (have: {', '.join(PROTOCOLS)})")
        protocol = PROTOCOLS[protocol]
    if not methods:
        raise UsageError("multisite needs at least one method")
    out_dir = Path(out_dir) if out_dir else settings.runs_dir() / "multisite" / protocol.name

    sites = site_datasets(protocol, per_site, base.unet.input_size, seed)
    source = Dataset.concat([sites[s] for s in protocol.sources], "source")
    target = Dataset.concat([sites[s] for s in protocol.targets], "target")

    rows = []
    for method in methods:
        config = base.with_changes(divergence=method.model_dump())
        artifacts = fit(config, source, target, out_dir / method.label.lower().replace(" ", "-"),
                        progress=progress)
        for k, (split_seed, checkpoint) in enumerate(zip(artifacts.split_seeds, artifacts.checkpoints)):
            _, val, _ = split(source, target, config.val_fraction, config.target_fraction, split_seed)
            per_source = {s: [] for s in protocol.sources}
            report = evaluate(checkpoint, val, split=k)
            for item, score in zip(val.manifest, report.per_image["dice"]):
                per_source[_site_of(item, sites, protocol.sources)].append(score)
            for site in protocol.sites:
                if site in protocol.sources:
                    scores = per_source[site]
                    dice = float(sum(scores) / len(scores)) if scores else float("nan")
                else:
                    dice = evaluate(checkpoint, sites[site], split=k).domain_mean(sites[site].domain_tag)
                rows.append({
                    "protocol": protocol.name, "method": method.label, "site": site,
                    "role": _column(protocol, site).split(":")[0], "seed": split_seed, "dice": dice,
                })
        logger.info(f"[MULTISITE] {protocol.name} / {method.label} done")

    df = pd.DataFrame(rows, columns=MULTISITE_COLUMNS)
    table = (df.assign(column=[_column(protocol, s) for s in df["site"]])
             .groupby(["method", "column"], sort=False)["dice"].mean()
             .unstack("column")
             .reindex(index=[m.label for m in methods], columns=[_column(protocol, s) for s in protocol.sites])
             .reset_index())
    write_table(df, out_dir / "multisite_cells.csv", MULTISITE_COLUMNS)
    write_table(table, out_dir / "multisite_table.csv", list(table.columns))
    return MultisiteResult(df, table, out_dir)


def _site_of(item: dict, sites: dict[int, Dataset], candidates: tuple[int, ...]) -> int:
    """Which source site a pooled manifest entry came from (scene seeds are unique per site)."""
    for site in candidates:
        if item.get("seed") == sites[site].manifest[0].get("seed"):
            return site
    raise UsageError(f"manifest entry {item} matches no source site")
