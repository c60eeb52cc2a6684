"""Problem files shipped with the package."""
from importlib import resources


def fixture_path(name):
    """Filesystem path of a shipped problem file, by stem (``"jump"``) or file name."""
    fname = name if name.endswith(".json") else name + ".json"
    return str(resources.files(__name__).joinpath(fname))


def fixture_names():
    return sorted(p.name[:-5] for p in resources.files(__name__).iterdir() if p.name.endswith(".json"))
