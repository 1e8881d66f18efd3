class KrfwsError(Exception):

    '''
    Base class of errors raised by krfws. The exit_code attribute is
    the process exit status used by the command line interface.
    '''

    exit_code = 1


class UsageError(KrfwsError):

    '''
    Invalid arguments, configuration keys, or a pipeline stage enabled
    without a trained model.
    '''

    exit_code = 1


class DataError(KrfwsError):

    '''
    Missing or malformed input data: annotation files, images, dataset
    directories, file name patterns.
    '''

    exit_code = 2


class NumericError(KrfwsError):

    '''
    Degenerate numerical input, e.g. a single-class split or coincident
    cluster centroids.
    '''

    exit_code = 3
