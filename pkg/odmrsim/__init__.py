from odmrsim.core.exceptions import OdmrSimError

__version__ = "0.1"

__all__ = ["OdmrSimError", "__version__"]
