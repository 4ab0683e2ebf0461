"""Forecast-driven horizontal autoscaling for edge stream processing.

Submodules: ``series`` (load simulation), ``nn`` (numpy GRU/CNN layers),
``forecasters``, ``arima``, ``metrics``, ``transfer`` (DTW, MMD and
adaptation), ``dsp`` (dataflow model and simulator), ``autoscaler``
(MAPE-K loop) and ``cli``.
"""

__version__ = "0.1.0"
