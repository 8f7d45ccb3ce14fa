"""shapcast: masked-attention load forecasting with exact coalition-game explanations."""

__version__ = "0.1.0"
