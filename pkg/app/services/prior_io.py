"""Prior JSON files: load, save and string round trips."""
import json
import logging
from pathlib import Path
from typing import Union

from pydantic import ValidationError

from app.core.exceptions import ExperimentIOError, InvalidDistributionError
from app.models.schemas import DistributionModel, ProductPriorModel
from app.services.quantile_dist import ProductPrior, QuantileDistribution

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def loads_prior(text: str) -> ProductPrior:
    """Parse a product prior; a bare distribution object becomes a one-buyer prior."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise InvalidDistributionError(f"prior is not valid JSON: {e}") from e
    try:
        if isinstance(data, dict) and "kind" in data:
            return ProductPrior((DistributionModel.model_validate(data).to_domain(),))
        return ProductPriorModel.model_validate(data).to_domain()
    except ValidationError as e:
        raise InvalidDistributionError(f"invalid prior: {e}") from e


def dumps_prior(prior: Union[ProductPrior, QuantileDistribution]) -> str:
    if isinstance(prior, QuantileDistribution):
        prior = ProductPrior((prior,))
    # json emits shortest round-trip reprs for floats
    return json.dumps(ProductPriorModel.from_domain(prior).model_dump(mode="json", exclude_none=True),
                      indent=2)


def load_prior(path: PathLike) -> ProductPrior:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ExperimentIOError(path, e.strerror or str(e)) from e
    prior = loads_prior(text)
    logger.debug("loaded %d-buyer %s prior from %s", prior.n, prior.family.value, path)
    return prior


def save_prior(prior: Union[ProductPrior, QuantileDistribution], path: PathLike) -> Path:
    path = Path(path)
    try:
        if path.parent != Path(""):
            path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(dumps_prior(prior) + "\n", encoding="utf-8")
    except OSError as e:
        raise ExperimentIOError(path, e.strerror or str(e)) from e
    logger.info("wrote prior to %s", path)
    return path
