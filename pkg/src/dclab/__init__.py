"""Double convergence of in-context representations on graph random walks.

Modules: :mod:`.graph` (vocabulary graphs and the reweighted operator),
:mod:`.dgp` (token sequences), :mod:`.attention` (typed attention maps),
:mod:`.forward` (layered forward process and latent recursion),
:mod:`.diagnostics` (convergence measurements), :mod:`.ingest`
(attention dumps and their classification) and :mod:`.cli`.
"""

__version__ = "0.1.0"

from importlib import resources as _resources


def bundled_config(name: str = "grid16.json"):
    """Path to a config shipped with the package; the ``.json`` suffix is optional."""
    if not name.endswith(".json"):
        name += ".json"
    return _resources.files(__name__).joinpath("configs", name)
