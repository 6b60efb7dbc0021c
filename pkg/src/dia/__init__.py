from .sim import DgpConfig, make_dgp
