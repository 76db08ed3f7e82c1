import logging
import os


class Client:

    def __init__(self):
        """
        Logging configuration
        """

        self._logger = self._load_logger('beamsight', os.environ.get('BEAMSIGHT_LOG_LEVEL', 'INFO'))

    @property
    def logger(self):
        return self._logger

    @logger.setter
    def logger(self, value):
        self._logger = value

    @staticmethod
    def _load_logger(name, level):
        logger = logging.getLogger(name)
        logger.setLevel(level.upper())

        # module reloads must not stack handlers
        if not logger.handlers:
            ch = logging.StreamHandler()
            ch.setLevel(level.upper())
            formatter = logging.Formatter('%(name)s - %(asctime)s - %(levelname)s - %(message)s')
            ch.setFormatter(formatter)
            logger.addHandler(ch)

        return logger


client = Client()
