from .models_evsign import EvSignNet, EncoderOutput


def load_model(cfg, n_glosses, n_words, factor_kwargs=None):
    model = EvSignNet(
        cfg,
        n_glosses=n_glosses,
        n_words=n_words,
        **(factor_kwargs or {}),
    )
    return model
