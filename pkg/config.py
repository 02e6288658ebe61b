import os
from dotenv import load_dotenv

load_dotenv()


class Config:
    # Logging
    LOG_LEVEL = os.getenv('RDCNET_LOG_LEVEL', 'INFO').upper()
    LOG_FORMAT = os.getenv('RDCNET_LOG_FORMAT', '%(asctime)s %(levelname)s %(name)s: %(message)s')
