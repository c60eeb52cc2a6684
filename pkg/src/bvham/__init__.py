"""Multiplier regularity for differential-inclusion optimal control.

Set-valued toolkit, cumulative variation of time-dependent multifunctions,
penalized direct transcription with multiplier extraction, Hamiltonian-trace
regularity checks and Lipschitz certificates for variational problems.
"""
from .setvalued import *  # noqa: F401,F403
from .multifun import *  # noqa: F401,F403
from .variation import *  # noqa: F401,F403
from .trajectory import *  # noqa: F401,F403
from .transcription import *  # noqa: F401,F403
from .hamiltonian import *  # noqa: F401,F403
from .conditions import *  # noqa: F401,F403
from .calcvar import *  # noqa: F401,F403
from .pipeline import *  # noqa: F401,F403
from .config import ConfigError, RunConfig, load_config, parse_config
from .fixtures import fixture_path, fixture_names

__version__ = "0.1.0"
